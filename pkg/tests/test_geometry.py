import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parcel_suction.errors import MeshFormatError, OutOfRange, TooFewPoints
from parcel_suction.geometry import (
    BACKGROUND,
    CameraModel,
    PointCloud,
    Pose,
    SpatialIndex,
    TriangleMesh,
    estimate_normals,
    farthest_point_sample,
    matrix_to_quat,
    quat_to_matrix,
    radius_query,
    rasterize_labels,
    ray_cast,
    ray_cast_many,
    read_obj,
    write_obj,
)
from parcel_suction.scene import box_mesh

from conftest import random_rotation, square, topdown_camera


def brute_fps(pts, m, seed):
    chosen = [seed]
    for _ in range(m - 1):
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def moller_trumbore(o, d, a, b, c):
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-15:
        return None
    s = o - a
    u = (s @ p) / det
    q = np.cross(s, e1)
    v = (d @ q) / det
    if u < 0 or v < 0 or u + v > 1:
        return None
    t = (e2 @ q) / det
    return t if t >= 1e-9 else None


# ---------------------------------------------------------------- poses


def test_quaternion_round_trip(rng):
    for _ in range(20):
        R = random_rotation(rng)
        assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_pose_inverse(rng):
    pose = Pose.from_matrix(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    assert np.allclose(pose.inverse_apply(pose.apply(p)), p)


# ---------------------------------------------------------------- normals


def test_normals_plane_grid():
    g = np.linspace(-1, 1, 21)
    X, Y = np.meshgrid(g, g)
    cloud = PointCloud(np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)]))
    out = estimate_normals(cloud, 8)
    assert np.allclose(out.normals, [0, 0, 1])


def test_normals_sphere_radial(rng):
    p = rng.normal(size=(2000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    out = estimate_normals(PointCloud(p), 16)
    cosang = np.abs(np.sum(out.normals * p, axis=1))
    ang = np.degrees(np.arccos(np.clip(cosang, 0, 1)))
    assert np.mean(ang < 10) >= 0.99


def test_normals_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.eye(4, 3)), 8)


def test_normals_oriented_up_and_unit(rng):
    p = rng.normal(size=(300, 3))
    n = estimate_normals(PointCloud(p), 10).normals
    assert np.allclose(np.linalg.norm(n, axis=1), 1, atol=1e-6)
    assert np.all(n[:, 2] >= 0)


def test_normals_vertical_plane_tie_breaks_toward_x():
    g = np.linspace(-1, 1, 11)
    Y, Z = np.meshgrid(g, g)
    p = np.column_stack([np.zeros(Y.size), Y.ravel(), Z.ravel()])
    n = estimate_normals(PointCloud(p), 8).normals
    assert np.allclose(n, [1, 0, 0])


def test_normals_collinear_fallback():
    p = np.column_stack([np.arange(20.0), np.zeros(20), np.zeros(20)])
    n = estimate_normals(PointCloud(p), 4).normals
    assert np.allclose(n, [0, 0, 1])


def test_normals_rotation_equivariant(rng):
    g = np.linspace(-0.5, 0.5, 15)
    X, Y = np.meshgrid(g, g)
    p = np.column_stack([X.ravel(), Y.ravel(), 0.3 * X.ravel() ** 2 + 0.2 * Y.ravel() ** 2])
    base = estimate_normals(PointCloud(p), 12).normals
    for _ in range(5):
        R = random_rotation(rng)
        rot = estimate_normals(PointCloud(p @ R.T), 12).normals
        expected = base @ R.T
        # equal up to the orientation sign convention
        assert np.allclose(np.abs(np.sum(rot * expected, axis=1)), 1, atol=1e-8)


# ---------------------------------------------------------------- FPS


def test_fps_line():
    pts = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
    assert list(farthest_point_sample(PointCloud(pts), 3, 0)) == [0, 10, 5]


def test_fps_full_and_single(rng):
    pts = rng.random((50, 3))
    assert sorted(farthest_point_sample(pts, 50, 7)) == list(range(50))
    assert list(farthest_point_sample(pts, 1, 7)) == [7]


def test_fps_errors(rng):
    pts = rng.random((5, 3))
    with pytest.raises(OutOfRange):
        farthest_point_sample(pts, 6, 0)
    with pytest.raises(OutOfRange):
        farthest_point_sample(pts, 2, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 120), st.integers(0, 2**31 - 1))
def test_fps_matches_brute_force(n, seed):
    r = np.random.default_rng(seed)
    pts = r.random((n, 3))
    m = int(r.integers(1, min(n, 12) + 1))
    s = int(r.integers(n))
    assert list(farthest_point_sample(pts, m, s)) == brute_fps(pts, m, s)


# ---------------------------------------------------------------- radius query


def test_radius_query_self_and_all(rng):
    pts = rng.random((64, 3))
    idx = SpatialIndex(pts)
    assert list(radius_query(idx, pts[9], 1e-9)) == [9]
    assert list(radius_query(idx, pts[0], 10.0)) == list(range(64))


def test_radius_query_matches_scan(rng):
    pts = rng.random((256, 3))
    idx = SpatialIndex(pts)
    for _ in range(100):
        c = rng.random(3)
        expect = np.nonzero(np.linalg.norm(pts - c, axis=1) <= 0.1)[0]
        assert np.array_equal(idx.radius_query(c, 0.1), expect)


def test_radius_query_large_cloud(rng):
    pts = rng.random((4096, 3))
    idx = SpatialIndex(pts)
    for _ in range(100):
        c, r = rng.random(3), rng.uniform(0.01, 0.3)
        expect = np.nonzero(np.linalg.norm(pts - c, axis=1) <= r)[0]
        assert np.array_equal(idx.radius_query(c, r), expect)


# ---------------------------------------------------------------- ray cast


def test_ray_hits_square():
    hit = ray_cast([(square(1.0), Pose())], [0, 0, 0], [0, 0, 1])
    assert hit is not None and hit.t == pytest.approx(1.0) and hit.instance == 0


def test_ray_misses_square():
    assert ray_cast([(square(1.0), Pose())], [5, 5, 0], [0, 0, 1]) is None


def test_ray_nearest_of_two_squares():
    scene = [(square(2.0), Pose()), (square(1.0), Pose())]
    hit = ray_cast(scene, [0.1, 0.2, 0], [0, 0, 1])
    tris = [m.transformed(p).triangles() for m, p in scene]
    ts = [(moller_trumbore(np.array([0.1, 0.2, 0.0]), np.array([0, 0, 1.0]), *t), i)
          for i, tri in enumerate(tris) for t in tri]
    t_oracle, inst = min((t, i) for t, i in ts if t is not None)
    assert hit.t == pytest.approx(t_oracle, abs=1e-12) and hit.instance == inst == 1


def test_ray_ignores_hits_behind():
    assert ray_cast([(square(-1.0), Pose())], [0, 0, 0], [0, 0, 1]) is None


def test_ray_matches_moller_trumbore(rng):
    mesh = box_mesh((0.3, 0.2, 0.1))
    pose = Pose.from_matrix(random_rotation(rng), (0.1, 0, 0))
    tris = mesh.transformed(pose).triangles()
    origins = rng.normal(size=(200, 3))
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, _ = ray_cast_many([(mesh, pose)], origins, dirs)
    for o, d, tt in zip(origins, dirs, t):
        ts = [moller_trumbore(o, d, *tri) for tri in tris]
        ts = [x for x in ts if x is not None]
        if ts:
            assert tt == pytest.approx(min(ts), abs=1e-9)
        else:
            assert not np.isfinite(tt)


def test_ray_watertight_on_shared_edge():
    # the ray passes exactly through the diagonal shared by both triangles
    hit = ray_cast([(square(1.0), Pose())], [0.25, 0.25, 0], [0, 0, 1])
    assert hit is not None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ray_rigid_invariance(seed):
    r = np.random.default_rng(seed)
    mesh = box_mesh((0.4, 0.3, 0.2))
    o = np.array([0.05, -0.02, -1.0]) + r.normal(scale=0.01, size=3)
    d = np.array([0.0, 0.0, 1.0])
    hit = ray_cast([(mesh, Pose())], o, d)
    R = random_rotation(r)
    tr = r.normal(size=3)
    pose = Pose.from_matrix(R, tr)
    hit2 = ray_cast([(mesh, pose)], pose.apply(o), R @ d)
    assert abs(hit.t - hit2.t) < 1e-9


# ---------------------------------------------------------------- rasterizer


def test_raster_empty_scene():
    img = rasterize_labels([], topdown_camera(res=(8, 6)))
    assert img.labels.shape == (6, 8)
    assert np.all(img.labels == BACKGROUND) and np.all(np.isinf(img.depth))


def test_raster_left_half_box():
    W = H = 64
    box = box_mesh((0.5, 1.0, 0.2))
    pose = Pose(t=(-0.25, 0.0, 0.1))
    img = rasterize_labels([(box, pose, 3)], topdown_camera(res=(W, H)))
    assert abs(img.count(3) - W * H / 2) <= W
    # the box occupies image columns with u < W/2 (x < 0)
    assert np.all(img.labels[:, : W // 2] == 3)
    assert np.allclose(img.depth[img.labels == 3], 5.0 - 0.2)


def test_raster_front_box_hides_back_box():
    cam = topdown_camera(res=(32, 32))
    a = (box_mesh((0.4, 0.4, 0.1)), Pose(t=(0, 0, 0.3)), 1)
    b = (box_mesh((0.3, 0.3, 0.1)), Pose(t=(0, 0, 0.05)), 2)
    img = rasterize_labels([a, b], cam)
    assert img.count(2) == 0 and img.count(1) > 0
    img2 = rasterize_labels([b, a], cam)
    assert np.array_equal(img.labels, img2.labels)


def test_raster_pinhole_depth_is_ray_distance():
    R = np.diag([1.0, -1.0, -1.0])
    cam = CameraModel(Pose.from_matrix(R, (0, 0, 2.0)), "pinhole", (40.0, 40.0, 16.0, 16.0), (32, 32))
    img = rasterize_labels([(square(0.0, half=2.0), Pose(), 1)], cam)
    assert np.all(img.labels == 1)
    vv, uu = np.nonzero(img.labels == 1)
    pts = cam.back_project(uu, vv, img.depth[vv, uu])
    assert np.allclose(pts[:, 2], 0.0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_raster_occluder_monotone(seed):
    r = np.random.default_rng(seed)
    cam = topdown_camera(res=(32, 32))
    items = []
    for i in range(3):
        items.append((box_mesh(r.uniform(0.1, 0.4, 3)), Pose(t=tuple(r.uniform(-0.3, 0.3, 3))), i + 1))
    before = rasterize_labels(items, cam)
    occ = (box_mesh(r.uniform(0.1, 0.4, 3)), Pose(t=tuple(r.uniform(-0.3, 0.3, 3))), 9)
    after = rasterize_labels(items + [occ], cam)
    for i in range(1, 4):
        assert after.count(i) <= before.count(i)


# ---------------------------------------------------------------- OBJ


def test_obj_round_trip():
    mesh = box_mesh((0.2, 0.1, 0.05))
    back = read_obj(write_obj(mesh))
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_ignores_other_statements():
    text = "# comment\no name\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1//1 2//1 3//1\n"
    mesh = read_obj(text)
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_obj_rejects_quads():
    with pytest.raises(MeshFormatError):
        read_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")


def test_obj_rejects_bad_index():
    with pytest.raises(MeshFormatError):
        read_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 9\n")
