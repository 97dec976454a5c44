import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from colonpipe.geometry import (BehindCameraError, CameraIntrinsics, GeometryError, PixelDepthObservation, Pose,
                                backproject, backproject_array, compose, inverse, load_intrinsics, load_poses,
                                look_rotation, pose_error, project, project_array, ray_to_z_depth,
                                save_intrinsics, save_poses, se3_exp, se3_log, so3_exp, so3_log, transform,
                                z_to_ray_depth)

K = CameraIntrinsics(200.0, 180.0, 63.5, 47.5, 128, 96)
finite = st.floats(-3.0, 3.0, allow_nan=False)
twists = st.lists(finite, min_size=6, max_size=6).map(np.array)


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(-1.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(float("nan"), 1.0, 1.0, 1.0, 4, 4)


def test_from_fov_centres_principal_point():
    k = CameraIntrinsics.from_fov(128, 64, 90.0)
    assert (k.cx, k.cy) == (63.5, 31.5)
    assert k.fx == pytest.approx(64.0)
    assert CameraIntrinsics.from_dict(k.to_dict()) == k


@given(st.floats(0, 127.9), st.floats(0, 95.9), st.floats(0.1, 500.0))
def test_backproject_project_roundtrip(u, v, d):
    obs = project(backproject(PixelDepthObservation(u, v, d), K), K)
    assert obs.u == pytest.approx(u, abs=1e-9)
    assert obs.v == pytest.approx(v, abs=1e-9)
    assert obs.depth == pytest.approx(d, rel=1e-12)


def test_principal_point_lies_on_axis():
    p = backproject(PixelDepthObservation(K.cx, K.cy, 10.0), K)
    np.testing.assert_allclose(p, [0.0, 0.0, 10.0])


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, -1.0], K)
    with pytest.raises(GeometryError):
        PixelDepthObservation(1.0, 1.0, 0.0)


def test_array_versions_match_scalar(rng):
    u, v, d = rng.uniform(0, 128, 50), rng.uniform(0, 96, 50), rng.uniform(1, 50, 50)
    pts = backproject_array(u, v, d, K)
    for i in range(50):
        np.testing.assert_allclose(pts[i], backproject(PixelDepthObservation(u[i], v[i], d[i]), K))
    uu, vv, zz = project_array(pts, K)
    np.testing.assert_allclose(np.c_[uu, vv, zz], np.c_[u, v, d], rtol=1e-12)


def test_ray_and_z_depth_are_inverse(rng):
    u, v, z = rng.uniform(0, 128, 20), rng.uniform(0, 96, 20), rng.uniform(1, 50, 20)
    r = z_to_ray_depth(z, u, v, K)
    np.testing.assert_allclose(np.linalg.norm(backproject_array(u, v, z, K), axis=1), r)
    np.testing.assert_allclose(ray_to_z_depth(r, u, v, K), z)


def test_pose_rejects_non_rotation():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


@given(twists, twists)
def test_compose_inverse(a, b):
    pa, pb = se3_exp(a), se3_exp(b)
    assert compose(pa, inverse(pa)).allclose(Pose.identity(), atol=1e-9)
    p = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(transform(compose(pa, pb), p), transform(pa, transform(pb, p)), atol=1e-9)


@given(twists)
def test_se3_log_exp_roundtrip(xi):
    if np.linalg.norm(xi[3:]) >= math.pi - 1e-3:
        xi = xi.copy()
        xi[3:] *= (math.pi - 1e-3) / np.linalg.norm(xi[3:])
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-8)


def test_so3_log_near_pi():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    for ang in (math.pi, math.pi - 1e-7, math.pi - 1e-4):
        w = so3_log(so3_exp(axis * ang))
        np.testing.assert_allclose(so3_exp(w), so3_exp(axis * ang), atol=1e-9)
        assert np.linalg.norm(w) == pytest.approx(ang, abs=1e-7)


def test_small_angle_exp_is_stable():
    w = np.array([1e-12, -2e-12, 0.0])
    np.testing.assert_allclose(so3_exp(w), np.eye(3) + np.array([[0, 0, -2e-12], [0, 0, -1e-12],
                                                                  [2e-12, 1e-12, 0]]), atol=1e-20)


def test_look_rotation_axes():
    fwd = np.array([0.0, 1.0, 1.0]) / math.sqrt(2)
    r = look_rotation(fwd, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(r[:, 2], fwd, atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    assert r[:, 1] @ np.array([0.0, 0.0, 1.0]) < 0  # image up points towards the hint
    with pytest.raises(GeometryError):
        look_rotation([0, 0, 1], [0, 0, 2])


def test_pose_error():
    a = se3_exp(np.array([1.0, 2.0, 3.0, 0.1, 0.0, 0.0]))
    b = compose(a, Pose(so3_exp([0.0, 0.2, 0.0]), np.zeros(3)))
    rot, trans = pose_error(a, b)
    assert rot == pytest.approx(0.2)
    assert trans == pytest.approx(0.0, abs=1e-12)


def test_serialisation_roundtrip(tmp_path, rng):
    poses = [se3_exp(rng.normal(size=6)) for _ in range(5)]
    save_poses(poses, tmp_path / "p.json")
    back = load_poses(tmp_path / "p.json")
    assert all(p.allclose(q, atol=1e-15) for p, q in zip(poses, back))
    save_intrinsics(K, tmp_path / "k.json")
    assert load_intrinsics(tmp_path / "k.json") == K
