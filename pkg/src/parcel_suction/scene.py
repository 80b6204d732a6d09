"""Procedural parcel-pile scenes: parcel meshes, mass properties, drop-and-settle
placement, serialization and conversion to labelled point clouds."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import BadDims, EmptyView, OpenMesh, PlacementFailed, SceneFormatError, MeshFormatError
from .geometry import (
    BACKGROUND,
    CameraModel,
    MeshSet,
    PointCloud,
    Pose,
    TriangleMesh,
    estimate_normals,
    rasterize_labels,
    ray_cast_many,
    read_obj,
    write_obj,
)

SCENE_SCHEMA = "scene/1"
N_SEGMENTS = 32
SUPPORT_SAMPLES = 128
MAX_ATTEMPTS = 50
DROP_SITES = 8
KINDS = ("rectangular", "planar", "cylindrical")


@dataclass(frozen=True)
class ParcelShape:
    kind: str
    dims: tuple

    def validate(self):
        d = np.asarray(self.dims, dtype=float)
        if self.kind not in KINDS or d.shape != (3,):
            raise BadDims(f"bad parcel {self.kind!r} {self.dims}")
        if self.kind == "planar":
            thin = int(np.argmin(d))
            others = np.delete(d, thin)
            ok = 0.002 <= d[thin] <= 0.015 and np.all((others >= 0.02) & (others <= 0.6))
        else:
            ok = bool(np.all((d >= 0.02) & (d <= 0.6)))
            if self.kind == "cylindrical":
                ok = ok and d[0] == d[1]
        if not ok:
            raise BadDims(f"dims {self.dims} invalid for {self.kind}")
        return self


def box_mesh(extents) -> TriangleMesh:
    hx, hy, hz = np.asarray(extents, dtype=float) / 2
    v = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    # vertex index = 4*ix + 2*iy + iz; faces wound outward
    f = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    return TriangleMesh(v, f)


def cylinder_mesh(radius, height, n_seg=N_SEGMENTS) -> TriangleMesh:
    ang = 2 * np.pi * np.arange(n_seg) / n_seg
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    h = height / 2
    v = np.vstack([
        [[0, 0, -h], [0, 0, h]],
        np.column_stack([ring, np.full(n_seg, -h)]),
        np.column_stack([ring, np.full(n_seg, h)]),
    ])
    faces = []
    for i in range(n_seg):
        j = (i + 1) % n_seg
        b0, b1, t0, t1 = 2 + i, 2 + j, 2 + n_seg + i, 2 + n_seg + j
        faces += [[b0, b1, t1], [b0, t1, t0], [0, b1, b0], [1, t0, t1]]
    return TriangleMesh(v, faces)


def make_parcel(shape: ParcelShape) -> TriangleMesh:
    shape.validate()
    if shape.kind == "cylindrical":
        return cylinder_mesh(shape.dims[0], shape.dims[2])
    return box_mesh(shape.dims)


def signed_volume(mesh: TriangleMesh) -> float:
    t = mesh.triangles()
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def mass_properties(mesh: TriangleMesh, density: float):
    """Mass and centre of mass from signed tetrahedra about the origin."""
    t = mesh.triangles()
    vols = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])) / 6.0
    vol = vols.sum()
    if vol <= 0:
        raise OpenMesh(f"signed volume {vol} <= 0")
    com = (vols[:, None] * t.sum(axis=1)).sum(axis=0) / (4.0 * vol)
    return density * vol, com


@dataclass
class SceneInstance:
    mesh: TriangleMesh
    pose: Pose
    mass: float
    com: np.ndarray
    instance_id: int
    density: float = 500.0
    kind: str = "rectangular"

    def world_mesh(self) -> TriangleMesh:
        return self.mesh.transformed(self.pose)


@dataclass
class SceneConfig:
    n_objects: tuple = (1, 50)
    bin_extents: tuple = (0.8, 0.8, 0.6)
    shape_weights: tuple = (0.5, 0.3, 0.2)
    density: float = 500.0
    friction_range: tuple = (0.3, 0.8)
    resolution: tuple = (512, 512)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.n_objects, int):
            self.n_objects = (self.n_objects, self.n_objects)
        lo, hi = self.n_objects
        if not 1 <= lo <= hi <= 50:
            raise ValueError(f"object count range {self.n_objects} outside [1, 50]")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.friction_range[0] > self.friction_range[1]:
            raise ValueError("empty friction range")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def default_camera(bin_extents, resolution=(512, 512)) -> CameraModel:
    """Top-down orthographic view covering the bin footprint."""
    bx, by, bz = bin_extents
    R = np.diag([1.0, -1.0, -1.0])
    return CameraModel(Pose.from_matrix(R, (0.0, 0.0, bz + 1.0)), "orthographic",
                       (float(bx), float(by)), tuple(int(r) for r in resolution))


@dataclass
class Scene:
    instances: list
    bin_extents: tuple
    camera: CameraModel
    seed: int
    friction: float = 0.5

    def mesh_items(self):
        return [(inst.mesh, inst.pose, inst.instance_id) for inst in self.instances]

    def mesh_set(self) -> MeshSet:
        return MeshSet([(inst.mesh, inst.pose) for inst in self.instances])

    def instance(self, instance_id) -> SceneInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)


def sample_object_count(config: SceneConfig, rng) -> int:
    lo, hi = config.n_objects
    return int(rng.integers(lo, hi + 1))


def sample_shape(config: SceneConfig, rng) -> ParcelShape:
    w = np.asarray(config.shape_weights, dtype=float)
    kind = KINDS[int(rng.choice(3, p=w / w.sum()))]
    if kind == "rectangular":
        dims = tuple(float(x) for x in rng.uniform(0.04, 0.2, 3))
    elif kind == "planar":
        a, b = rng.uniform(0.06, 0.25, 2)
        dims = (float(a), float(b), float(rng.uniform(0.002, 0.015)))
    else:
        r = float(rng.uniform(0.02, 0.05))
        dims = (r, r, float(rng.uniform(0.06, 0.2)))
    return ParcelShape(kind, dims)


def _resting_rotation(kind, rng):
    """Orientation before yaw: which face points up (axis-aligned rests only)."""
    if kind == "cylindrical":
        lying = rng.random() < 0.5
        return np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float) if lying else np.eye(3)
    if kind == "planar":
        return np.eye(3)
    choice = int(rng.integers(3))
    return [np.eye(3),
            np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float),
            np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]], dtype=float)][choice]


def _yaw(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _support_grid(lo, hi, n=SUPPORT_SAMPLES):
    nx = 16 if (hi[0] - lo[0]) >= (hi[1] - lo[1]) else 8
    ny = n // nx
    gx = lo[0] + (np.arange(nx) + 0.5) / nx * (hi[0] - lo[0])
    gy = lo[1] + (np.arange(ny) + 0.5) / ny * (hi[1] - lo[1])
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def settle_height(mesh: TriangleMesh, placed: list, floor_z: float = 0.0) -> float:
    """Vertical offset that drops ``mesh`` (world frame, any height) onto the
    floor or the instances in ``placed`` using sampled support points.

    Support samples include a grid over the footprint and the mesh's own
    lowest vertices, so flat-bottomed parcels touch the floor exactly.
    """
    lo, hi = mesh.aabb()
    xy = _support_grid(lo, hi)
    low_v = mesh.vertices[mesh.vertices[:, 2] <= lo[2] + 1e-9, :2]
    shrink = (low_v - low_v.mean(axis=0)) * 1e-9
    xy = np.vstack([xy, low_v - shrink])
    below = lo[2] - 1.0
    up = np.tile([0.0, 0.0, 1.0], (len(xy), 1))
    origins = np.column_stack([xy, np.full(len(xy), below)])
    t_obj, _ = ray_cast_many([(mesh, None)], origins, up)
    on_obj = np.isfinite(t_obj)
    if not on_obj.any():
        return floor_z - lo[2]
    bottom = below + t_obj[on_obj]
    support = np.full(on_obj.sum(), floor_z)
    if placed:
        top = max(inst_mesh.aabb()[1][2] for inst_mesh in placed) + 1.0
        down = np.tile([0.0, 0.0, -1.0], (on_obj.sum(), 1))
        o2 = np.column_stack([xy[on_obj], np.full(on_obj.sum(), top)])
        t_sup, _ = ray_cast_many([(m, None) for m in placed], o2, down)
        hit = np.isfinite(t_sup)
        support[hit] = np.maximum(support[hit], top - t_sup[hit])
    return float(np.max(support - bottom))


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Drop parcels one at a time into the bin, deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    bx, by, bz = config.bin_extents
    n = sample_object_count(config, rng)
    friction = float(rng.uniform(*config.friction_range))
    instances, placed = [], []
    for inst_id in range(1, n + 1):
        for _attempt in range(MAX_ATTEMPTS):
            shape = sample_shape(config, rng)
            local = make_parcel(shape)
            R = _yaw(rng.uniform(0, 2 * np.pi)) @ _resting_rotation(shape.kind, rng)
            rotated = TriangleMesh(local.vertices @ R.T, local.faces)
            lo, hi = rotated.aabb()
            half = (hi - lo) / 2
            if np.any(half[:2] * 2 > [bx, by]):
                continue
            best = None
            for _site in range(DROP_SITES):
                cx = rng.uniform(-bx / 2 + half[0], bx / 2 - half[0]) - (lo[0] + hi[0]) / 2
                cy = rng.uniform(-by / 2 + half[1], by / 2 - half[1]) - (lo[1] + hi[1]) / 2
                start = TriangleMesh(rotated.vertices + [cx, cy, 0.0], rotated.faces)
                dz = settle_height(start, placed)
                if best is None or dz < best[2]:
                    best = (cx, cy, dz)
            cx, cy, dz = best
            world = TriangleMesh(rotated.vertices + [cx, cy, dz], rotated.faces)
            wlo, whi = world.aabb()
            if np.any(wlo[:2] < -np.array([bx, by]) / 2 - 1e-9) or np.any(whi[:2] > np.array([bx, by]) / 2 + 1e-9):
                continue
            if whi[2] > bz:
                continue
            pose = Pose.from_matrix(R, (cx, cy, dz))
            mass, com_local = mass_properties(local, config.density)
            instances.append(SceneInstance(local, pose, float(mass), pose.apply(com_local),
                                           inst_id, config.density, shape.kind))
            placed.append(world)
            break
        else:
            raise PlacementFailed(f"object {inst_id} could not be placed after {MAX_ATTEMPTS} attempts")
    camera = default_camera(config.bin_extents, config.resolution)
    return Scene(instances, tuple(config.bin_extents), camera, int(seed), friction)


def scene_to_cloud(scene: Scene, camera: Optional[CameraModel] = None, k: int = 16) -> PointCloud:
    """Back-project every labelled pixel; normals by PCA over ``k`` neighbours."""
    camera = camera or scene.camera
    img = rasterize_labels(scene.mesh_items(), camera)
    vv, uu = np.nonzero(img.labels != BACKGROUND)
    if len(vv) == 0:
        raise EmptyView("no foreground pixels")
    pts = camera.back_project(uu, vv, img.depth[vv, uu])
    cloud = PointCloud(pts, None, img.labels[vv, uu])
    if len(cloud) <= k:
        cloud.normals = np.tile([0.0, 0.0, 1.0], (len(cloud), 1))
        return cloud
    return estimate_normals(cloud, k)


# ---------------------------------------------------------------- serialization


def scene_seed(base_seed: int, index: int) -> int:
    """Per-scene seed derived from (base seed, scene index); order independent."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "type": cam.projection,
        "pose": {"quat_wxyz": list(cam.pose.quat), "t": list(cam.pose.t)},
        "resolution": list(cam.resolution),
        "params": list(cam.params),
    }


def camera_from_dict(d: dict) -> CameraModel:
    pose = Pose(tuple(d["pose"]["quat_wxyz"]), tuple(d["pose"]["t"]))
    return CameraModel(pose, d["type"], tuple(d["params"]), tuple(d["resolution"]))


def save_scene(scene: Scene, directory, extra: Optional[dict] = None) -> None:
    os.makedirs(os.path.join(directory, "meshes"), exist_ok=True)
    inst_rows = []
    for inst in scene.instances:
        rel = f"meshes/{inst.instance_id:03d}.obj"
        with open(os.path.join(directory, rel), "w", newline="\n") as f:
            f.write(write_obj(inst.mesh))
        inst_rows.append({
            "id": inst.instance_id,
            "kind": inst.kind,
            "mesh": rel,
            "pose": {"quat_wxyz": list(inst.pose.quat), "t": list(inst.pose.t)},
            "mass": inst.mass,
            "com": [float(c) for c in inst.com],
            "density": inst.density,
        })
    bx, by, bz = scene.bin_extents
    doc = {
        "schema": SCENE_SCHEMA,
        "seed": scene.seed,
        "bin": {"x": bx, "y": by, "z": bz},
        "camera": camera_to_dict(scene.camera),
        "instances": inst_rows,
        "friction": scene.friction,
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(directory, "scene.json"), "w", newline="\n") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_scene(directory) -> Scene:
    path = os.path.join(directory, "scene.json")
    try:
        with open(path) as f:
            doc = json.load(f)
        instances = []
        for row in doc["instances"]:
            with open(os.path.join(directory, row["mesh"])) as f:
                mesh = read_obj(f.read())
            pose = Pose(tuple(row["pose"]["quat_wxyz"]), tuple(row["pose"]["t"]))
            instances.append(SceneInstance(mesh, pose, float(row["mass"]), np.asarray(row["com"], dtype=float),
                                           int(row["id"]), float(row.get("density", 500.0)),
                                           row.get("kind", "rectangular")))
        b = doc["bin"]
        return Scene(instances, (b["x"], b["y"], b["z"]), camera_from_dict(doc["camera"]),
                     int(doc["seed"]), float(doc.get("friction", 0.5)))
    except (OSError, KeyError, TypeError, ValueError, MeshFormatError) as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


CLOUD_HEADER = "x,y,z,nx,ny,nz,instance_id"


def save_cloud(cloud: PointCloud, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(CLOUD_HEADER + "\n")
        for p, n, i in zip(cloud.points.tolist(), cloud.normals.tolist(), cloud.instance_ids.tolist()):
            f.write(f"{p[0]!r},{p[1]!r},{p[2]!r},{n[0]!r},{n[1]!r},{n[2]!r},{int(i)}\n")


def load_cloud(path) -> PointCloud:
    try:
        with open(path) as f:
            header = f.readline().strip()
        if header != CLOUD_HEADER:
            raise ValueError(f"unexpected header {header!r}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc
    return PointCloud(data[:, :3], data[:, 3:6], data[:, 6].astype(np.int64))
