import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from coda4dgs.gaussians import (SH_C0, SH_COEFFS, Camera, EmptySceneError, GaussianScene,
                                InvalidRotationError, build_covariance, evaluate_sh,
                                init_from_points, load_scene, project_covariance,
                                quaternion_to_matrix, save_scene, scene_from_bytes,
                                scene_to_bytes)
from coda4dgs.numeric import FormatError

from conftest import random_scene

quats = hnp.arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(
    lambda q: np.linalg.norm(q) > 1e-3)
log_scales = hnp.arrays(np.float64, 3, elements=st.floats(-4, 1))


def test_covariance_examples():
    ident = np.array([1.0, 0, 0, 0])
    np.testing.assert_allclose(build_covariance(np.zeros(3), ident), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(build_covariance(np.log([2.0, 1, 1]), ident),
                               np.diag([4.0, 1, 1]), atol=1e-14)
    qz = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(build_covariance(np.log([2.0, 1, 1]), qz),
                               np.diag([1.0, 4, 1]), atol=1e-14)


def test_zero_quaternion_is_rejected():
    with pytest.raises(InvalidRotationError):
        build_covariance(np.zeros(3), np.zeros(4))


@given(quats)
def test_rotation_is_orthonormal(q):
    R = quaternion_to_matrix(q[None])[0]
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(log_scales, quats)
def test_covariance_spd_and_sign_invariant(ls, q):
    cov = build_covariance(ls, q)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= np.exp(2 * ls).min() * (1 - 1e-9) - 1e-9
    np.testing.assert_allclose(build_covariance(ls, -q), cov, rtol=1e-12, atol=1e-15)


def _axis_camera(f=50.0):
    return Camera(np.eye(4), f, f, 10.0, 10.0, 21, 21)


def test_projected_identity_covariance():
    cam, z = _axis_camera(), 4.0
    out = project_covariance(np.eye(3), cam, np.array([0, 0, z]))
    np.testing.assert_allclose(out, ((50 / z) ** 2 + 0.3) * np.eye(2), rtol=1e-14)


def test_projected_anisotropy_and_depth_scaling():
    cam = _axis_camera()
    cov = np.diag([4.0, 1.0, 1.0])
    near = project_covariance(cov, cam, np.array([0, 0, 2.0])) - 0.3 * np.eye(2)
    far = project_covariance(cov, cam, np.array([0, 0, 4.0])) - 0.3 * np.eye(2)
    assert near[0, 0] / near[1, 1] == pytest.approx(4.0, rel=1e-14)
    np.testing.assert_allclose(np.sqrt(np.diag(far)), 0.5 * np.sqrt(np.diag(near)), rtol=1e-14)


def test_point_behind_camera_cannot_be_projected():
    with pytest.raises(ValueError):
        project_covariance(np.eye(3), _axis_camera(), np.array([0, 0, -1.0]))


def test_sh_examples(rng):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    np.testing.assert_array_equal(evaluate_sh(np.zeros(SH_COEFFS), d), [0.5, 0.5, 0.5])
    c = np.zeros(SH_COEFFS)
    c[[0, 16, 32]] = [0.3, -1.0, 2.0]
    np.testing.assert_allclose(evaluate_sh(c, d), 0.28209479 * np.array([0.3, -1.0, 2.0]) + 0.5,
                               rtol=1e-8)
    deg1 = np.zeros(SH_COEFFS)
    deg1[[1, 2, 3, 17, 35]] = rng.normal(size=5)
    a = evaluate_sh(deg1, d, offset=False)
    np.testing.assert_allclose(evaluate_sh(deg1, -d, offset=False), -a, rtol=1e-14)


@given(hnp.arrays(np.float64, (2, SH_COEFFS), elements=st.floats(-3, 3)),
       st.floats(-2, 2), st.floats(-2, 2), hnp.arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_sh_is_linear(c, a, b, d):
    if np.linalg.norm(d) < 1e-3:
        d = np.array([0.0, 0.0, 1.0])
    d = d / np.linalg.norm(d)
    lhs = evaluate_sh(a * c[0] + b * c[1], d, offset=False)
    rhs = a * evaluate_sh(c[0], d, offset=False) + b * evaluate_sh(c[1], d, offset=False)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_init_scales_from_neighbours():
    one = init_from_points([[0.0, 0, 0]], [[0.5, 0.5, 0.5]], 4)
    np.testing.assert_allclose(one.log_scales, np.log(0.01))
    two = init_from_points([[0.0, 0, 0], [1.0, 0, 0]], [[0.5, 0.5, 0.5]] * 2, 4)
    np.testing.assert_allclose(two.log_scales, 0.0, atol=1e-15)
    # brute-force 3-NN mean distance on a line
    x = np.array([0.0, 1.0, 3.0, 6.0])
    pts = np.c_[x, np.zeros(4), np.zeros(4)]
    scene = init_from_points(pts, np.full((4, 3), 0.5), 4)
    expect = [np.sort(np.abs(x - xi))[1:4].mean() for xi in x]
    np.testing.assert_allclose(np.exp(scene.log_scales[:, 0]), expect, rtol=1e-13)
    assert expect[0] == pytest.approx(10 / 3)


def test_init_colour_round_trip_and_features():
    scene = init_from_points(np.eye(3), np.array([[1.0, 0, 0], [0, 1, 0], [0.2, 0.4, 0.6]]), 5)
    rgb = evaluate_sh(scene.sh_coeffs, np.tile([0, 0, 1.0], (3, 1)))
    np.testing.assert_allclose(rgb, [[1, 0, 0], [0, 1, 0], [0.2, 0.4, 0.6]], atol=1e-14)
    assert scene.sh_coeffs[0, 0] == pytest.approx(0.5 / SH_C0)
    np.testing.assert_allclose(np.linalg.norm(scene.context_features, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(scene.opacities, 0.1)


def test_init_empty_raises():
    with pytest.raises(EmptySceneError):
        init_from_points(np.zeros((0, 3)), np.zeros((0, 3)), 4)


@given(n=st.integers(0, 12), F=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_scene_round_trip(n, F, seed):
    scene = random_scene(np.random.default_rng(seed), n, F)
    data = scene_to_bytes(scene)
    back, used = scene_from_bytes(data)
    assert used == len(data)
    for name in GaussianScene.ARRAYS:
        np.testing.assert_array_equal(getattr(back, name), getattr(scene, name))


def test_scene_file_errors(rng):
    data = scene_to_bytes(random_scene(rng, 5, 3))
    with pytest.raises(FormatError, match="offset 0"):
        scene_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="truncated"):
        scene_from_bytes(data[:-10])
    bad = bytearray(data)
    bad[40] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        scene_from_bytes(bytes(bad))
    ver = bytearray(data)
    ver[4] = 9
    with pytest.raises(FormatError, match="version"):
        scene_from_bytes(bytes(ver))


def test_empty_scene_file(tmp_path):
    save_scene(GaussianScene.empty(7), tmp_path / "e")
    back = load_scene(tmp_path / "e")
    assert len(back) == 0 and back.feature_dim == 7


def test_look_at_projects_target_to_centre():
    cam = Camera.look_at([1.0, -0.5, -2.0], [0.2, 0.3, 3.0], 31, 17, 30.0)
    p = cam.view_matrix @ np.r_[0.2, 0.3, 3.0, 1.0]
    np.testing.assert_allclose(p[:2] / p[2], [15.0, 8.0], atol=1e-12)
    np.testing.assert_allclose(cam.center, [1.0, -0.5, -2.0], atol=1e-12)


def test_camera_rejects_bad_pose():
    W = np.eye(4)
    W[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(W, 1, 1, 0, 0, 2, 2)
    with pytest.raises(ValueError):
        Camera(np.eye(4), 1, 1, 0, 0, 2, 2, near=1.0, far=0.5)


def test_rotated_camera_keeps_centre(camera):
    r = camera.rotated(15.0, -5.0)
    np.testing.assert_allclose(r.center, camera.center, atol=1e-12)
    assert not np.allclose(r.rotation, camera.rotation)
    np.testing.assert_allclose(camera.rotated(0, 0).world_to_camera, camera.world_to_camera,
                               atol=1e-12)
