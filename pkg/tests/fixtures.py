"""Hand-built scenes with analytically known scores."""
import numpy as np

from parcel_suction.geometry import Pose
from parcel_suction.scene import Scene, SceneInstance, box_mesh, default_camera, mass_properties

BIN = (0.6, 0.6, 0.5)


def make_instance(dims, center, inst_id, yaw=0.0, density=500.0):
    mesh = box_mesh(dims)
    c, s = np.cos(yaw), np.sin(yaw)
    pose = Pose.from_matrix([[c, -s, 0], [s, c, 0], [0, 0, 1]], center)
    mass, com = mass_properties(mesh, density)
    return SceneInstance(mesh, pose, float(mass), pose.apply(com), inst_id, density)


def scene_of(instances, res=(128, 128)):
    return Scene(list(instances), BIN, default_camera(BIN, res), 0)


def flat_plate(res=(128, 128)):
    return scene_of([make_instance((0.2, 0.2, 0.01), (0.0, 0.0, 0.005), 1)], res)


def lone_box(dims=(0.2, 0.1, 0.05), res=(128, 128)):
    return scene_of([make_instance(dims, (0.0, 0.0, dims[2] / 2), 1)], res)


def half_occluded(res=(128, 128)):
    """Box 1 on the floor; identical box 2 resting on its left half."""
    lower = make_instance((0.2, 0.2, 0.05), (0.0, 0.0, 0.025), 1)
    upper = make_instance((0.2, 0.2, 0.05), (-0.1, 0.0, 0.075), 2)
    return scene_of([lower, upper], res)


def buried(res=(128, 128)):
    small = make_instance((0.1, 0.1, 0.05), (0.0, 0.0, 0.025), 1)
    cover = make_instance((0.3, 0.3, 0.05), (0.0, 0.0, 0.075), 2)
    return scene_of([small, cover], res)
