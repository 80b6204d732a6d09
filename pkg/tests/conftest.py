import numpy as np
import pytest

from parcel_suction.geometry import CameraModel, Pose, TriangleMesh


def square(z=0.0, half=0.5):
    v = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def topdown_camera(width=1.0, height=1.0, res=(64, 64), z=5.0, center=(0.0, 0.0)):
    R = np.diag([1.0, -1.0, -1.0])
    return CameraModel(Pose.from_matrix(R, (center[0], center[1], z)), "orthographic", (width, height), res)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(tuple(q)).R


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
