import numpy as np
import pytest
from hypothesis import given, strategies as st

from affordpose import kernels
from affordpose.camera import Camera, DegenerateProjectionError, project
from affordpose.hand_model import FLEX_AXES, N_KEYPOINTS, HandPose, forward_kinematics
from affordpose.occlusion import (
    HandMask, MeshValidationError, OcclusionLabels, crossing_counts, object_occlusion, occlusion_bin,
    occlusion_labels, ray_triangle, read_pgm, render_depth, self_occlusion, write_pgm,
)
from affordpose.synthetic import family_mean


@pytest.mark.parametrize("k,label", [(0, "Low"), (5, "Low"), (6, "Medium"), (10, "Medium"), (11, "High"),
                                     (21, "High")])
def test_bins(k, label):
    assert occlusion_bin(k) == label


@pytest.mark.parametrize("k", [-1, 22])
def test_bin_range(k):
    with pytest.raises(ValueError):
        occlusion_bin(k)


@given(st.integers(0, 20))
def test_bins_are_monotone(k):
    order = ("Low", "Medium", "High")
    assert order.index(occlusion_bin(k)) <= order.index(occlusion_bin(k + 1))


def test_object_occlusion_from_mask():
    data = np.zeros((20, 30), bool)
    data[5:10, 5:15] = True
    mask = HandMask(data)
    kp = np.array([[7.0, 6.0], [14.4, 9.4], [14.6, 9.0], [-5.0, 10.0], [3.0, 40.0], [29.6, 0.0]])
    assert object_occlusion(kp, mask).tolist() == [False, False, True, True, True, True]
    assert object_occlusion(kp, HandMask(np.zeros((20, 30), bool))).all()


def _brute_ray_triangle(o, d, tri):
    a, b, c = tri
    n = np.cross(b - a, c - a)
    denom = n @ d
    if abs(denom) < 1e-14:
        return None
    t = n @ (a - o) / denom
    p = o + t * d
    area = n @ n
    u = np.cross(c - b, p - b) @ n / area
    v = np.cross(a - c, p - c) @ n / area
    w = 1 - u - v
    if min(u, v, w) < -1e-12 or t <= kernels.RAY_EPS:
        return None
    return t


def test_ray_triangle_against_plane_barycentric_oracle():
    rng = np.random.default_rng(0)
    hits = agree = 0
    for _ in range(10_000):
        o = rng.normal(0, 2, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        tri = rng.normal(0, 2, (3, 3))
        got, want = ray_triangle(o, d, tri), _brute_ray_triangle(o, d, tri)
        if (got is None) == (want is None) and (got is None or abs(got - want) < 1e-8 * max(1, abs(want))):
            agree += 1
        hits += want is not None
    assert hits > 300
    assert agree == 10_000


def test_ray_triangle_special_cases():
    tri = np.array([[0.0, 0, 5], [3, 0, 5], [0, 3, 5]])
    assert ray_triangle(tri.mean(0) - [0, 0, 5], [0, 0, 1], tri) == pytest.approx(5.0)
    assert ray_triangle([0, 0, 0], [1, 0, 0], tri) is None
    assert ray_triangle([1, 1, 6], [0, 0, 1], tri) is None
    with pytest.raises(ValueError):
        ray_triangle([0, 0, 0], [0, 0, 2], tri)


@given(st.integers(0, 2**32 - 1))
def test_numba_and_numpy_crossings_agree(seed):
    rng = np.random.default_rng(seed)
    tris = rng.normal(0, 1, (40, 3, 3))
    origins = rng.normal(0, 1, (15, 3))
    targets = rng.normal(0, 1, (15, 3)) + [0, 0, 4]
    a = kernels.ray_crossings(origins, targets, tris, use_numba=True)
    b = kernels.ray_crossings(origins, targets, tris, use_numba=False)
    assert np.array_equal(a, b)


@given(st.integers(0, 2**32 - 1))
def test_numba_and_numpy_raster_agree(seed):
    rng = np.random.default_rng(seed)
    uv = rng.uniform(-5, 37, (30, 2))
    z = rng.uniform(1, 10, 30)
    faces = rng.integers(0, 30, (25, 3))
    a = kernels.rasterize_depth(uv, z, faces, 32, 24, use_numba=True)
    b = kernels.rasterize_depth(uv, z, faces, 32, 24, use_numba=False)
    assert np.array_equal(a, b)


def test_flat_hand_has_single_exit_per_keypoint(toy, cam):
    pose = HandPose(np.zeros((15, 3)), np.zeros(3), np.array([0.0, -90.0, 500.0]))
    kps, verts = forward_kinematics(toy, pose)
    counts = crossing_counts(verts, toy.faces, kps, cam)
    assert counts.tolist() == [1] * N_KEYPOINTS


def fist_pose():
    theta = np.zeros((15, 3))
    for f in range(4):
        for j, s in enumerate((1.3, 1.6, 1.0)):
            theta[3 * f + j] = s * FLEX_AXES[3 * f + j]
    theta[12] = FLEX_AXES[12] * 0.5 + np.array([0.0, 0.0, 0.9])
    theta[13] = 0.6 * FLEX_AXES[13]
    theta[14] = 0.6 * FLEX_AXES[14]
    return HandPose(theta, np.array([0.0, 0.999 * np.pi, 0.0]), np.array([0.0, -90.0, 500.0]))


def test_fist_from_behind_hides_fingers(toy, cam):
    kps, verts = forward_kinematics(toy, fist_pose())
    assert self_occlusion(verts, toy.faces, kps, cam).sum() >= 5


def test_extra_triangle_adds_one_crossing(toy, cam):
    pose = HandPose(np.zeros((15, 3)), np.zeros(3), np.array([0.0, -90.0, 500.0]))
    kps, verts = forward_kinematics(toy, pose)
    base = crossing_counts(verts, toy.faces, kps, cam)
    k = 8
    mid = 0.5 * (kps[k] + cam.center)
    d = cam.center - kps[k]
    d /= np.linalg.norm(d)
    e1 = np.cross(d, [1.0, 0, 0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    tri = np.stack([mid + 2 * e1, mid - e1 + 1.7 * e2, mid - e1 - 1.7 * e2])
    v2 = np.vstack([verts, tri])
    f2 = np.vstack([toy.faces, [[len(verts), len(verts) + 1, len(verts) + 2]]])
    counts = crossing_counts(v2, f2, kps, cam)
    assert counts[k] == base[k] + 1
    assert np.array_equal(np.delete(counts, k), np.delete(base, k))


def _fragment_counts(verts, faces, kps, cam, merge=1e-6):
    """Screen-space oracle: fragments of every face under each keypoint's projection."""
    pc = cam.to_camera(verts)
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], 1)
    kuv = project(cam, kps)
    kz = cam.to_camera(kps)[:, 2]
    a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    out = np.zeros(len(kps), int)
    for i, p in enumerate(kuv):
        w0 = (b[:, 0] - p[0]) * (c[:, 1] - p[1]) - (b[:, 1] - p[1]) * (c[:, 0] - p[0])
        w1 = (c[:, 0] - p[0]) * (a[:, 1] - p[1]) - (c[:, 1] - p[1]) * (a[:, 0] - p[0])
        w2 = area - w0 - w1
        ok = np.abs(area) > 1e-12
        inside = ok & (((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0)))
        bary = np.stack([w0, w1, w2], 1)[inside] / area[inside, None]
        zf = pc[faces[inside], 2]
        depth = 1.0 / np.sum(bary / zf, axis=1)       # perspective-correct interpolation
        front = np.sort(depth[depth < kz[i] - 1e-6])
        if front.size:
            out[i] = 1 + int(np.sum(np.diff(front) > merge))
    return out


def test_crossings_agree_with_fragment_buffer_oracle(toy, cam):
    rng = np.random.default_rng(21)
    agree = total = 0
    for _ in range(50):
        theta = family_mean(int(rng.integers(0, 28)), ("small", "medium", "large")[rng.integers(3)])
        pose = HandPose(theta + rng.normal(0, 0.1, theta.shape), rng.normal(0, 0.6, 3),
                        np.array([0.0, -90.0, 500.0]))
        kps, verts = forward_kinematics(toy, pose)
        ours = self_occlusion(verts, toy.faces, kps, cam)
        oracle = _fragment_counts(verts, toy.faces, kps, cam) >= 2
        agree += int(np.sum(ours == oracle))
        total += N_KEYPOINTS
    assert agree / total >= 0.95


def test_pgm_round_trip(tmp_path):
    data = np.random.default_rng(0).random((17, 23)) > 0.5
    write_pgm(tmp_path / "m.pgm", HandMask(data))
    assert np.array_equal(read_pgm(tmp_path / "m.pgm").data, data)
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")


def test_keypoint_behind_camera_is_rejected(toy, cam):
    pose = HandPose(np.zeros((15, 3)), np.zeros(3), np.array([0.0, 0.0, -20.0]))
    kps, verts = forward_kinematics(toy, pose)
    with pytest.raises(DegenerateProjectionError):
        crossing_counts(verts, toy.faces, kps, cam)


def test_collapsed_mesh_is_rejected(toy, cam):
    pose = HandPose(np.zeros((15, 3)), np.zeros(3), np.array([0.0, -90.0, 500.0]))
    kps, verts = forward_kinematics(toy, pose)
    flat = np.repeat(verts[:1], len(verts), axis=0)
    with pytest.raises(MeshValidationError):
        crossing_counts(flat, toy.faces, kps, cam)


def test_labels_require_matching_mask(toy, cam):
    pose = HandPose(np.zeros((15, 3)), np.zeros(3), np.array([0.0, -90.0, 500.0]))
    kps, verts = forward_kinematics(toy, pose)
    with pytest.raises(ValueError, match="mask"):
        occlusion_labels(verts, toy.faces, kps, cam, HandMask(np.ones((64, 64), bool)))
    full = HandMask(np.ones((128, 128), bool))
    labels = occlusion_labels(verts, toy.faces, kps, cam, full)
    assert labels.count == 0 and labels.bin == "Low"


def test_labels_dict_round_trip():
    rng = np.random.default_rng(0)
    labels = OcclusionLabels(rng.random(21) > 0.7, rng.random(21) > 0.7)
    back = OcclusionLabels.from_dict(labels.to_dict())
    assert np.array_equal(back.occluded, labels.occluded)
    bad = labels.to_dict()
    bad["count"] += 1
    with pytest.raises(ValueError):
        OcclusionLabels.from_dict(bad)


def test_depth_render_covers_hand(toy, cam):
    pose = HandPose(np.zeros((15, 3)), np.zeros(3), np.array([0.0, -90.0, 500.0]))
    kps, verts = forward_kinematics(toy, pose)
    depth = render_depth(verts, toy.faces, cam)
    uv = np.round(project(cam, kps)).astype(int)
    assert np.all(np.isfinite(depth[uv[:, 1], uv[:, 0]]))
    assert np.all(depth[uv[:, 1], uv[:, 0]] < cam.to_camera(kps)[:, 2])


def test_env_flag_selects_numpy_path():
    import os
    import subprocess
    import sys
    env = dict(os.environ, AFFORDPOSE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from affordpose import kernels; print(kernels.USE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == "False"
