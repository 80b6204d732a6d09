"""Analytic suction-grasp scores: seal, wrench, collision, visibility and their
product, per candidate and for whole scenes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ContactOffSurface, DegenerateView
from .geometry import (
    MeshSet,
    PointCloud,
    SpatialIndex,
    farthest_point_sample,
    nearest_surface,
    point_triangles_distance,
    rasterize_labels,
    ray_cast_many,
)
from .scene import Scene, SceneInstance, scene_to_cloud

GRAVITY = 9.81
ON_SURFACE_TOL = 1e-4
LABELS_HEADER = "point_index,x,y,z,nx,ny,nz,seal,wrench,collision,visibility,score"


def default_perimeter_count(radius: float, spacing: float = 0.002) -> int:
    return int(np.clip(round(2 * np.pi * radius / spacing), 8, 64))


@dataclass(frozen=True)
class SuctionCupModel:
    radius: float = 0.015
    n_perimeter: Optional[int] = None
    max_gap: float = 0.01

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("cup radius must be positive")
        if self.n_perimeter is None:
            object.__setattr__(self, "n_perimeter", default_perimeter_count(self.radius))
        if self.n_perimeter < 8:
            raise ValueError("need at least 8 perimeter samples")


@dataclass(frozen=True)
class GripperModel:
    body_radius: float = 0.02
    body_height: float = 0.08
    standoff: float = 0.005

    def __post_init__(self):
        if min(self.body_radius, self.body_height, self.standoff) <= 0:
            raise ValueError("gripper dimensions must be positive")

    @property
    def workspace_radius(self) -> float:
        # h + R as the nominal workspace, widened when the standoff pushes the
        # far rim of the body outside that sphere
        exact = np.hypot(self.standoff + self.body_height, self.body_radius)
        return float(max(self.body_height + self.body_radius, exact))


@dataclass(frozen=True)
class WrenchModel:
    """Material-condition wrench parameters.

    ``mu`` and ``V_f`` are carried for completeness; only the elastic
    restoring torque limit ``tau_thr = r * k * pi`` enters the score.
    """

    mu: float = 0.5
    k: float = 20.0
    r: float = 0.015
    V_f: float = 60.0
    g: float = GRAVITY

    @property
    def tau_thr(self) -> float:
        return self.r * self.k * np.pi


@dataclass(frozen=True)
class SuctionCandidate:
    contact: tuple
    approach: tuple

    @classmethod
    def make(cls, contact, approach) -> "SuctionCandidate":
        n = np.asarray(approach, dtype=float)
        n = n / np.linalg.norm(n)
        return cls(tuple(float(c) for c in contact), tuple(float(c) for c in n))

    @property
    def t(self):
        return np.asarray(self.contact, dtype=float)

    @property
    def n(self):
        return np.asarray(self.approach, dtype=float)


@dataclass(frozen=True)
class ScoreAnnotation:
    seal: float
    wrench: float
    collision: float
    visibility: float

    @property
    def combined(self) -> float:
        return self.seal * self.wrench * self.collision * self.visibility

    def as_row(self):
        return (self.seal, self.wrench, self.collision, self.visibility, self.combined)


# ---------------------------------------------------------------- seal


def tangent_frame(n, ref_x=(1.0, 0.0, 0.0), ref_y=(0.0, 1.0, 0.0)):
    """Orthonormal (e1, e2) spanning the plane normal to each row of ``n``.

    e1 = n x ref_x, falling back to n x ref_y when n is parallel to ref_x.
    """
    n = np.atleast_2d(np.asarray(n, dtype=float))
    e1 = np.cross(n, ref_x)
    weak = np.linalg.norm(e1, axis=1) < 1e-6
    e1[weak] = np.cross(n[weak], ref_y)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


def seal_scores(mesh_set, contacts, normals, cup: SuctionCupModel, frame=None) -> np.ndarray:
    """Seal score for many candidates; contacts are assumed on a surface.

    ``frame`` optionally gives the (x, y) reference axes of the ring's
    tangent frame, for evaluating the same ring in a rotated world.
    """
    ms = mesh_set if isinstance(mesh_set, MeshSet) else MeshSet(mesh_set)
    t = np.atleast_2d(np.asarray(contacts, dtype=float))
    n = np.atleast_2d(np.asarray(normals, dtype=float))
    e1, e2 = tangent_frame(n, *frame) if frame is not None else tangent_frame(n)
    theta = 2 * np.pi * np.arange(cup.n_perimeter) / cup.n_perimeter
    ring = cup.radius * (np.cos(theta)[None, :, None] * e1[:, None, :] + np.sin(theta)[None, :, None] * e2[:, None, :])
    v = t[:, None, :] + ring
    origins = v + cup.max_gap * n[:, None, :]
    dirs = np.broadcast_to(-n[:, None, :], origins.shape)
    hit_t, _ = ray_cast_many(ms, origins.reshape(-1, 3), dirs.reshape(-1, 3), t_max=2 * cup.max_gap)
    hit_t = hit_t.reshape(len(t), cup.n_perimeter)
    ok = np.all(np.isfinite(hit_t), axis=1)
    proj = origins - np.where(np.isfinite(hit_t), hit_t, 0.0)[..., None] * n[:, None, :]
    l = np.linalg.norm(np.roll(v, -1, axis=1) - v, axis=2)
    lt = np.linalg.norm(np.roll(proj, -1, axis=1) - proj, axis=2)
    stretch = np.minimum(1.0, (lt - l) / l)
    score = np.clip(1.0 - stretch.max(axis=1), 0.0, 1.0)
    return np.where(ok, score, 0.0)


def seal_score(mesh_set, cand: SuctionCandidate, cup: SuctionCupModel = SuctionCupModel()) -> float:
    """Compliant-ring seal score: 1 minus the worst perimeter stretch after
    projecting the cup ring onto the scene along the approach axis."""
    ms = mesh_set if isinstance(mesh_set, MeshSet) else MeshSet(mesh_set)
    dist, _ = nearest_surface(ms, cand.t)
    if dist > ON_SURFACE_TOL:
        raise ContactOffSurface(f"contact is {dist:.3g} m from the nearest surface")
    return float(seal_scores(ms, cand.t, cand.n, cup)[0])


# ---------------------------------------------------------------- wrench


def wrench_formula(tau_e, angle, tau_thr):
    return (1.0 - np.minimum(1.0, np.abs(tau_e) / tau_thr)) * (1.0 - np.asarray(angle) / np.pi)


def wrench_terms(mass, com, contacts, normals, g=GRAVITY):
    """|tau_e| (gravity torque about the contact, orthogonal to the approach
    axis) and the angle between approach and the upward vertical."""
    contacts = np.atleast_2d(np.asarray(contacts, dtype=float))
    n = np.atleast_2d(np.asarray(normals, dtype=float))
    force = np.array([0.0, 0.0, -mass * g])
    tau = np.cross(np.asarray(com, dtype=float) - contacts, force)
    tau_e = tau - np.sum(tau * n, axis=1, keepdims=True) * n
    angle = np.arccos(np.clip(n[:, 2], -1.0, 1.0))
    return np.linalg.norm(tau_e, axis=1), angle


def wrench_score(instance: SceneInstance, cand: SuctionCandidate, wm: WrenchModel = WrenchModel()) -> float:
    tau_e, angle = wrench_terms(instance.mass, instance.com, cand.t, cand.n, wm.g)
    return float(wrench_formula(tau_e, angle, wm.tau_thr)[0])


# ---------------------------------------------------------------- collision


def points_in_body(points, contact, n, grip: GripperModel):
    """Mask of points inside the gripper body cylinder above ``contact``."""
    base = np.asarray(contact, dtype=float) + grip.standoff * np.asarray(n, dtype=float)
    rel = np.asarray(points, dtype=float) - base
    axial = rel @ n
    radial = np.linalg.norm(rel - axial[:, None] * n, axis=1)
    return (axial >= 0) & (axial <= grip.body_height) & (radial <= grip.body_radius)


def collision_score(cloud: PointCloud, index: SpatialIndex, cand: SuctionCandidate,
                    grip: GripperModel, target_id: int) -> float:
    """0.0 if any foreign point of the workspace lies inside the body, else 1.0."""
    idx = index.radius_query(cand.t, grip.workspace_radius)
    idx = idx[cloud.instance_ids[idx] != target_id]
    if idx.size and points_in_body(cloud.points[idx], cand.t, cand.n, grip).any():
        return 0.0
    return 1.0


# ---------------------------------------------------------------- visibility


def visibility_score(scene: Scene, target_id: int, full_counts: Optional[dict] = None) -> float:
    """Visible pixel fraction: pixels in the full render over pixels alone."""
    inst = scene.instance(target_id)
    solo = rasterize_labels([(inst.mesh, inst.pose, target_id)], scene.camera).count(target_id)
    if solo == 0:
        raise DegenerateView(f"instance {target_id} covers no pixels when rendered alone")
    if full_counts is None:
        visible = rasterize_labels(scene.mesh_items(), scene.camera).count(target_id)
    else:
        visible = full_counts.get(target_id, 0)
    return visible / solo


# ---------------------------------------------------------------- scene-level


class SceneScorer:
    """Scoring context for one scene: point cloud, index and cached visibility."""

    def __init__(self, scene: Scene, cup=None, grip=None, wm=None, cloud: Optional[PointCloud] = None):
        self.scene = scene
        self.cup = cup or SuctionCupModel()
        self.grip = grip or GripperModel()
        self.wm = wm or WrenchModel()
        self.cloud = cloud if cloud is not None else scene_to_cloud(scene)
        self.index = SpatialIndex(self.cloud.points)
        self.mesh_set = scene.mesh_set()
        self._pos = {inst.instance_id: i for i, inst in enumerate(scene.instances)}
        img = rasterize_labels(scene.mesh_items(), scene.camera)
        ids, counts = np.unique(img.labels, return_counts=True)
        self._full_counts = dict(zip(ids.tolist(), counts.tolist()))
        self._visibility = {}

    def visibility(self, instance_id: int) -> float:
        if instance_id not in self._visibility:
            try:
                v = visibility_score(self.scene, instance_id, self._full_counts)
            except DegenerateView:
                v = 0.0
            self._visibility[instance_id] = v
        return self._visibility[instance_id]

    def _surface_distance(self, points, ids):
        dist = np.full(len(points), np.inf)
        for iid in np.unique(ids):
            if iid not in self._pos:
                continue
            sel = np.nonzero(ids == iid)[0]
            tri = self.mesh_set.tris[self._pos[iid]]
            dist[sel] = point_triangles_distance(points[sel], tri).min(axis=1)
        return dist

    def score_many(self, points, normals, instance_ids) -> np.ndarray:
        """(N, 4) sub-scores [seal, wrench, collision, visibility]."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        ids = np.asarray(instance_ids, dtype=np.int64).reshape(-1)
        out = np.zeros((len(points), 4))
        on_surface = self._surface_distance(points, ids) <= ON_SURFACE_TOL
        if not on_surface.any():
            return out
        sel = np.nonzero(on_surface)[0]
        out[sel, 0] = seal_scores(self.mesh_set, points[sel], normals[sel], self.cup)
        for iid in np.unique(ids[sel]):
            rows = sel[ids[sel] == iid]
            inst = self.scene.instance(int(iid))
            tau_e, angle = wrench_terms(inst.mass, inst.com, points[rows], normals[rows], self.wm.g)
            out[rows, 1] = wrench_formula(tau_e, angle, self.wm.tau_thr)
            out[rows, 3] = self.visibility(int(iid))
        lists = self.index.radius_query_many(points[sel], self.grip.workspace_radius)
        for row, nbr in zip(sel, lists):
            nbr = nbr[self.cloud.instance_ids[nbr] != ids[row]]
            hit = nbr.size and points_in_body(self.cloud.points[nbr], points[row], normals[row], self.grip).any()
            out[row, 2] = 0.0 if hit else 1.0
        return out

    def score(self, cand: SuctionCandidate, instance_id: Optional[int] = None) -> ScoreAnnotation:
        if instance_id is None:
            dist, pos = nearest_surface(self.mesh_set, cand.t)
            if dist > ON_SURFACE_TOL:
                return ScoreAnnotation(0.0, 0.0, 0.0, 0.0)
            instance_id = self.scene.instances[pos].instance_id
        row = self.score_many(cand.t, cand.n, [instance_id])[0]
        return ScoreAnnotation(*(float(x) for x in row))


@dataclass
class AnnotatedScene:
    cloud: PointCloud
    indices: np.ndarray
    scores: np.ndarray  # (N, 4) seal, wrench, collision, visibility

    @property
    def combined(self) -> np.ndarray:
        return np.prod(self.scores, axis=1)

    def __iter__(self) -> Iterator:
        for idx, sub in zip(self.indices, self.scores):
            cand = SuctionCandidate.make(self.cloud.points[idx], self.cloud.normals[idx])
            yield int(idx), cand, ScoreAnnotation(*(float(s) for s in sub))

    def __len__(self):
        return len(self.indices)

    def rows(self):
        """labels.csv rows ordered by point index."""
        order = np.argsort(self.indices, kind="stable")
        for j in order:
            i = self.indices[j]
            p, n = self.cloud.points[i], self.cloud.normals[i]
            s = self.scores[j]
            yield (int(i), *p, *n, *s, float(np.prod(s)))


def annotate_scene(scene: Scene, n_points: int = 16384, cup=None, grip=None, wm=None,
                   scorer: Optional[SceneScorer] = None) -> AnnotatedScene:
    """FPS-sample candidates from the scene cloud and score each one."""
    scorer = scorer or SceneScorer(scene, cup, grip, wm)
    cloud = scorer.cloud
    idx = farthest_point_sample(cloud, min(n_points, len(cloud)), 0)
    normals = cloud.normals[idx]
    scores = scorer.score_many(cloud.points[idx], normals, cloud.instance_ids[idx])
    scores[normals[:, 2] < 0] = 0.0
    return AnnotatedScene(cloud, idx, scores)


def format_labels(ann: AnnotatedScene) -> str:
    lines = [LABELS_HEADER]
    for row in ann.rows():
        lines.append(",".join([str(row[0])] + [repr(float(x)) for x in row[1:]]))
    return "\n".join(lines) + "\n"


def parse_labels(text: str):
    """(point_index, points, normals, sub-scores (N, 4), combined) from labels.csv text."""
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != LABELS_HEADER:
        raise ValueError("unexpected labels.csv header")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]]).reshape(-1, 12)
    return data[:, 0].astype(np.int64), data[:, 1:4], data[:, 4:7], data[:, 7:11], data[:, 11]
