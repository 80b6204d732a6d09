"""Geometric primitives: meshes, point clouds, spatial queries, ray casting,
normal estimation, farthest point sampling and a z-buffer label rasterizer.

Arrays are float64 numpy arrays; a "Vec3" is any length-3 array-like.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshFormatError, OutOfRange, TooFewPoints

BACKGROUND = -1
RAY_EPS = 1e-9
UP = np.array([0.0, 0.0, 1.0])


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion given as (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local coordinates to world: p -> R p + t."""

    quat: tuple = (1.0, 0.0, 0.0, 0.0)
    t: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)):
        return cls(tuple(float(v) for v in matrix_to_quat(R)), tuple(float(v) for v in t))

    @property
    def R(self):
        return quat_to_matrix(self.quat)

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + np.asarray(self.t)

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=float) @ self.R.T

    def inverse_apply(self, points):
        return (np.asarray(points, dtype=float) - np.asarray(self.t)) @ self.R

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first."""
        return Pose.from_matrix(self.R @ other.R, self.apply(other.t))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self):
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshFormatError("face index out of range")
        if np.any(triangle_areas(self.triangles()) <= 1e-12):
            raise MeshFormatError("degenerate face")
        return self

    def triangles(self):
        return self.vertices[self.faces]

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.faces.copy())

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def triangle_areas(tris):
    tris = np.asarray(tris, dtype=float)
    return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals length differs from points")
        if self.instance_ids is not None:
            self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64).reshape(-1)
            if len(self.instance_ids) != n:
                raise ValueError("instance_ids length differs from points")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.instance_ids is None else self.instance_ids[idx],
        )


class SpatialIndex:
    """Immutable kd-tree over a point set; results match a brute-force scan."""

    def __init__(self, points):
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def radius_query(self, center, r: float) -> np.ndarray:
        if r <= 0:
            raise ValueError("radius must be positive")
        center = np.asarray(center, dtype=float)
        # widen slightly, then filter with the exact predicate
        idx = np.asarray(self._tree.query_ball_point(center, r * (1 + 1e-12) + 1e-15), dtype=np.int64)
        if idx.size:
            d = np.linalg.norm(self.points[idx] - center, axis=1)
            idx = idx[d <= r]
        return np.sort(idx)

    def radius_query_many(self, centers, r: float):
        """Exact radius results for each row of ``centers``."""
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        lists = self._tree.query_ball_point(centers, r * (1 + 1e-12) + 1e-15)
        out = []
        for c, idx in zip(centers, lists):
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size:
                idx = idx[np.linalg.norm(self.points[idx] - c, axis=1) <= r]
            out.append(np.sort(idx))
        return out

    def knn(self, queries, k: int):
        """Indices and distances of the ``k`` nearest points (self included)."""
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return i, d


def radius_query(index: SpatialIndex, center, r: float) -> np.ndarray:
    return index.radius_query(center, r)


# ---------------------------------------------------------------- normals


def _pca(neigh):
    """Eigen-decomposition of per-row neighbourhood covariances (ascending)."""
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neigh.shape[1]
    return np.linalg.eigh(cov)


def orient_up(normals):
    """Flip normals so n.z >= 0; exact ties go toward +x, then +y."""
    n = np.array(normals, dtype=float)
    tol = 1e-12
    flip = n[:, 2] < -tol
    tie_z = np.abs(n[:, 2]) <= tol
    flip |= tie_z & (n[:, 0] < -tol)
    tie_x = tie_z & (np.abs(n[:, 0]) <= tol)
    flip |= tie_x & (n[:, 1] < 0)
    n[flip] *= -1
    return n


def estimate_normals(cloud: PointCloud, k: int = 16, index: SpatialIndex | None = None) -> PointCloud:
    """PCA normals from the ``k`` nearest neighbours of each point.

    Neighbourhoods whose covariance has two vanishing eigenvalues (collinear
    or coincident points) have no defined normal and get +z.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    n = len(cloud)
    if n <= k:
        raise TooFewPoints(f"need more than {k} points, got {n}")
    index = index or SpatialIndex(cloud.points)
    nbr, _ = index.knn(cloud.points, k + 1)
    evals, evecs = _pca(cloud.points[nbr])
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)
    normals[degenerate] = UP
    normals = orient_up(_unit(normals))
    return PointCloud(cloud.points, normals, cloud.instance_ids)


# ---------------------------------------------------------------- FPS


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset; ties go to the smallest index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    n = len(pts)
    if not 1 <= m <= n:
        raise OutOfRange(f"m={m} outside [1, {n}]")
    if not 0 <= seed_index < n:
        raise OutOfRange(f"seed_index={seed_index} outside [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    mind = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[j] = nxt
        np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1), out=mind)
    return chosen


# ---------------------------------------------------------------- ray casting


class Hit(NamedTuple):
    t: float
    instance: int
    point: np.ndarray


class MeshSet:
    """World-space triangles of posed meshes, prepared for repeated ray casts."""

    def __init__(self, items):
        self.tris = []
        self.boxes = []
        for item in items:
            mesh, pose = item[0], item[1]
            tri = mesh.transformed(pose).triangles() if pose is not None else mesh.triangles()
            self.tris.append(tri)
            flat = tri.reshape(-1, 3)
            self.boxes.append((flat.min(axis=0), flat.max(axis=0)))

    def __len__(self):
        return len(self.tris)


def _as_meshset(mesh_set):
    return mesh_set if isinstance(mesh_set, MeshSet) else MeshSet(mesh_set)


def _slab(origins, dirs, lo, hi, t_max):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab and outside it
    par = dirs == 0
    outside = par & ((origins < lo) | (origins > hi))
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    ok = (leave >= np.maximum(enter, 0.0) - 1e-12) & (enter <= t_max) & ~outside.any(axis=1)
    return ok


def _watertight(origins, dirs, tris):
    """Watertight ray/triangle test (Woop, Benthin & Wald) for all pairs.

    Returns an (R, M) array of hit distances, +inf where there is no hit.
    """
    R = len(origins)
    kz = np.argmax(np.abs(dirs), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    rows = np.arange(R)
    neg = dirs[rows, kz] < 0
    kx, ky = np.where(neg, ky, kx), np.where(neg, kx, ky)
    dz = dirs[rows, kz]
    sx = (dirs[rows, kx] / dz)[:, None]
    sy = (dirs[rows, ky] / dz)[:, None]
    sz = (1.0 / dz)[:, None]

    def comps(v):
        rel = v[None, :, :] - origins[:, None, :]
        return tuple(np.take_along_axis(rel, k[:, None, None], axis=2)[..., 0] for k in (kx, ky, kz))

    ax, ay, az = comps(tris[:, 0])
    bx, by, bz = comps(tris[:, 1])
    cx, cy, cz = comps(tris[:, 2])
    ax, ay = ax - sx * az, ay - sy * az
    bx, by = bx - sx * bz, by - sy * bz
    cx, cy = cx - sx * cz, cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    miss = ((u < 0) | (v < 0) | (w < 0)) & ((u > 0) | (v > 0) | (w > 0))
    det = u + v + w
    miss |= det == 0
    tt = u * (sz * az) + v * (sz * bz) + w * (sz * cz)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = tt / det
    t[miss] = np.inf
    return t


def ray_cast_many(mesh_set, origins, dirs, t_max: float = np.inf, chunk: int = 400_000):
    """Nearest hits for many rays.

    Returns (t, instance) arrays; misses have t = inf and instance = -1.
    Only hits with t >= 1e-9 and t <= t_max count.
    """
    ms = _as_meshset(mesh_set)
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    best_t = np.full(len(origins), np.inf)
    best_i = np.full(len(origins), -1, dtype=np.int64)
    for inst, (tri, (lo, hi)) in enumerate(zip(ms.tris, ms.boxes)):
        cand = np.nonzero(_slab(origins, dirs, lo - 1e-9, hi + 1e-9, t_max))[0]
        step = max(1, chunk // max(len(tri), 1))
        for s in range(0, len(cand), step):
            sel = cand[s:s + step]
            t = _watertight(origins[sel], dirs[sel], tri)
            t[(t < RAY_EPS) | (t > t_max)] = np.inf
            tmin = t.min(axis=1)
            better = tmin < best_t[sel]
            best_t[sel[better]] = tmin[better]
            best_i[sel[better]] = inst
    return best_t, best_i


def ray_cast(mesh_set, origin, direction) -> Optional[Hit]:
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    t, i = ray_cast_many(mesh_set, origin[None], direction[None])
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), int(i[0]), origin + t[0] * direction)


# ---------------------------------------------------------------- distances


def _segment_dist2(p, a, b):
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    s = np.clip(np.sum((p - a) * ab, axis=-1) / denom, 0.0, 1.0)
    d = p - (a + s[..., None] * ab)
    return np.sum(d * d, axis=-1)


def point_triangles_distance(points, tris):
    """(P, M) Euclidean distances from points to triangles."""
    p = np.asarray(points, dtype=float)[:, None, :]
    a, b, c = (tris[None, :, i] for i in range(3))
    n = np.cross(b - a, c - a)
    nn = np.sum(n * n, axis=-1)
    dist_plane = np.sum((p - a) * n, axis=-1) / np.sqrt(nn)
    q = p - dist_plane[..., None] * n / np.sqrt(nn)[..., None]
    # barycentric sign test of the projection
    s0 = np.sum(np.cross(b - a, q - a) * n, axis=-1)
    s1 = np.sum(np.cross(c - b, q - b) * n, axis=-1)
    s2 = np.sum(np.cross(a - c, q - c) * n, axis=-1)
    inside = (s0 >= 0) & (s1 >= 0) & (s2 >= 0)
    edge = np.minimum(np.minimum(_segment_dist2(p, a, b), _segment_dist2(p, b, c)), _segment_dist2(p, c, a))
    return np.where(inside, np.abs(dist_plane), np.sqrt(edge))


def nearest_surface(mesh_set, point):
    """(distance, instance index) of the closest mesh surface to ``point``."""
    ms = _as_meshset(mesh_set)
    point = np.asarray(point, dtype=float)
    best = (np.inf, -1)
    for inst, (tri, (lo, hi)) in enumerate(zip(ms.tris, ms.boxes)):
        box_gap = np.linalg.norm(np.maximum(0, np.maximum(lo - point, point - hi)))
        if box_gap >= best[0]:
            continue
        d = float(point_triangles_distance(point[None], tri).min())
        if d < best[0]:
            best = (d, inst)
    return best


# ---------------------------------------------------------------- camera / rasterizer


@dataclass(frozen=True)
class CameraModel:
    """Camera looking along its local +z, x right, y down (image rows).

    ``projection`` is "orthographic" with params (width_m, height_m) or
    "pinhole" with params (fx, fy, cx, cy) in pixels.
    """

    pose: Pose
    projection: str = "orthographic"
    params: tuple = (1.0, 1.0)
    resolution: tuple = (512, 512)

    def __post_init__(self):
        W, H = self.resolution
        if W < 1 or H < 1:
            raise ValueError("resolution must be at least 1x1")
        if self.projection == "pinhole":
            if self.params[0] <= 0 or self.params[1] <= 0:
                raise ValueError("focal lengths must be positive")
        elif self.projection == "orthographic":
            if self.params[0] <= 0 or self.params[1] <= 0:
                raise ValueError("orthographic extents must be positive")
        else:
            raise ValueError(f"unknown projection {self.projection!r}")

    @property
    def ortho(self):
        return self.projection == "orthographic"

    def project(self, cam_pts):
        """Camera-frame points -> continuous pixel coords (u, v) and view depth z."""
        W, H = self.resolution
        x, y, z = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
        if self.ortho:
            wm, hm = self.params
            return x * (W / wm) + W / 2, y * (H / hm) + H / 2, z
        fx, fy, cx, cy = self.params
        return fx * x / z + cx, fy * y / z + cy, z

    def pixel_rays_cam(self, u, v):
        """Camera-frame origins and (unnormalised, z = 1) directions at pixel centres."""
        W, H = self.resolution
        uc = np.asarray(u, dtype=float) + 0.5
        vc = np.asarray(v, dtype=float) + 0.5
        if self.ortho:
            wm, hm = self.params
            o = np.stack([(uc - W / 2) * (wm / W), (vc - H / 2) * (hm / H), np.zeros_like(uc)], axis=-1)
            d = np.broadcast_to([0.0, 0.0, 1.0], o.shape)
            return o, np.array(d)
        fx, fy, cx, cy = self.params
        d = np.stack([(uc - cx) / fx, (vc - cy) / fy, np.ones_like(uc)], axis=-1)
        return np.zeros_like(d), d

    def back_project(self, u, v, depth):
        """World points for pixels (u, v) at the rasterizer's depth convention."""
        o, d = self.pixel_rays_cam(u, v)
        depth = np.asarray(depth, dtype=float)
        if self.ortho:
            cam = o + depth[..., None] * d
        else:
            cam = depth[..., None] * _unit(d)
        return self.pose.apply(cam.reshape(-1, 3)).reshape(cam.shape)


@dataclass
class LabelImage:
    labels: np.ndarray
    depth: np.ndarray

    def count(self, instance_id: int) -> int:
        return int(np.count_nonzero(self.labels == instance_id))


def rasterize_labels(scene_meshes, camera: CameraModel) -> LabelImage:
    """Z-buffer instance labels sampled at pixel centres.

    ``scene_meshes`` holds (mesh, pose, instance_id) triples. Arrays are
    indexed [row v, column u]. Depth is the view-axis distance for an
    orthographic camera and the distance along the pixel ray for pinhole.
    """
    W, H = camera.resolution
    labels = np.full((H, W), BACKGROUND, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    for mesh, pose, inst in scene_meshes:
        world = pose.apply(mesh.vertices) if pose is not None else mesh.vertices
        cam = camera.pose.inverse_apply(world)
        if camera.ortho:
            keep_v = cam[:, 2] > 0
        else:
            keep_v = cam[:, 2] > 1e-6
        pu, pv, pz = camera.project(np.where(keep_v[:, None], cam, 1.0))
        for f in mesh.faces:
            if not keep_v[f].all():
                continue
            _raster_tri(pu[f], pv[f], pz[f], inst, labels, zbuf, camera)
    if not camera.ortho:
        vv, uu = np.nonzero(np.isfinite(zbuf))
        _, d = camera.pixel_rays_cam(uu, vv)
        zbuf[vv, uu] *= np.linalg.norm(d, axis=-1)
    return LabelImage(labels, zbuf)


def _raster_tri(u, v, z, inst, labels, zbuf, camera):
    H, W = labels.shape
    u0 = max(int(np.ceil(u.min() - 0.5)), 0)
    u1 = min(int(np.floor(u.max() - 0.5)), W - 1)
    v0 = max(int(np.ceil(v.min() - 0.5)), 0)
    v1 = min(int(np.floor(v.max() - 0.5)), H - 1)
    if u0 > u1 or v0 > v1:
        return
    area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if area == 0:
        return
    uc = np.arange(u0, u1 + 1) + 0.5
    vc = np.arange(v0, v1 + 1)[:, None] + 0.5
    w0 = (u[2] - u[1]) * (vc - v[1]) - (v[2] - v[1]) * (uc - u[1])
    w1 = (u[0] - u[2]) * (vc - v[2]) - (v[0] - v[2]) * (uc - u[2])
    w2 = (u[1] - u[0]) * (vc - v[0]) - (v[1] - v[0]) * (uc - u[0])
    if area < 0:
        w0, w1, w2, area = -w0, -w1, -w2, -area
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return
    b0, b1, b2 = w0 / area, w1 / area, w2 / area
    if camera.ortho:
        depth = b0 * z[0] + b1 * z[1] + b2 * z[2]
    else:
        depth = 1.0 / (b0 / z[0] + b1 / z[1] + b2 / z[2])
    zsub = zbuf[v0:v1 + 1, u0:u1 + 1]
    lsub = labels[v0:v1 + 1, u0:u1 + 1]
    upd = inside & (depth < zsub)
    zsub[upd] = depth[upd]
    lsub[upd] = inst


# ---------------------------------------------------------------- OBJ I/O


def write_obj(mesh: TriangleMesh) -> str:
    out = io.StringIO()
    for x, y, z in mesh.vertices:
        out.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
    for i, j, k in mesh.faces + 1:
        out.write(f"f {i} {j} {k}\n")
    return out.getvalue()


def read_obj(text: str) -> TriangleMesh:
    """Parse the ``v``/triangular ``f`` subset of OBJ; other statements are ignored."""
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshFormatError(f"line {lineno}: non-triangle face")
                faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
        except ValueError as exc:
            raise MeshFormatError(f"line {lineno}: {exc}") from exc
    return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces).reshape(-1, 3)).validate()
