import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridslam.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    Frame,
    InvalidDepthError,
    Pose,
    backproject,
    project,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
    warp_pixel,
    warp_points,
)


def random_pose(rng, rot_scale=1.0, t_scale=1.0):
    xi = np.concatenate([rng.normal(size=3) * t_scale, rng.normal(size=3) * rot_scale])
    return se3_exp(xi)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 100, 80, 60, 160, 120)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 170, 60, 160, 120)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 80, 60, 160, 120, depth_scale=0)


def test_intrinsics_line_roundtrip(intr_small):
    assert CameraIntrinsics.from_line(intr_small.to_line()) == intr_small
    np.testing.assert_allclose(intr_small.K @ intr_small.K_inv, np.eye(3), atol=1e-15)


def test_project_examples(intr_small):
    px, z = project([0, 0, 1], intr_small)
    np.testing.assert_array_equal(px, [80, 60])
    assert z == 1
    px, _ = project([0.5, 0, 1], intr_small)
    np.testing.assert_array_equal(px, [130, 60])
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], intr_small)
    with pytest.raises(BehindCameraError):
        project([0, 0, 0], intr_small)


def test_backproject_examples(intr_small):
    np.testing.assert_array_equal(backproject((80, 60), 2.0, intr_small), [0, 0, 2])
    np.testing.assert_allclose(backproject((130, 60), 1.0, intr_small), [0.5, 0, 1])
    with pytest.raises(InvalidDepthError):
        backproject((10, 10), 0.0, intr_small)


def test_backproject_roundtrip_1000(intr_small, rng):
    worst = 0.0
    for _ in range(1000):
        px = rng.uniform([0, 0], [160, 120])
        d = rng.uniform(0.1, 10.0)
        q, z = project(backproject(px, d, intr_small), intr_small)
        worst = max(worst, np.abs(q - px).max(), abs(z - d))
    assert worst < 1e-9


def test_se3_exp_examples():
    p = se3_exp(np.zeros(6))
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    np.testing.assert_array_equal(p.translation, np.zeros(3))
    p = se3_exp([1, 2, 3, 0, 0, 0])
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    np.testing.assert_allclose(p.translation, [1, 2, 3])


def test_se3_roundtrip_1000(rng):
    worst = 0.0
    for _ in range(1000):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0, 3) / np.linalg.norm(phi)
        xi = np.concatenate([rng.normal(size=3), phi])
        worst = max(worst, np.abs(se3_log(se3_exp(xi)) - xi).max())
    assert worst < 1e-9


def test_so3_log_near_pi():
    axis = np.array([1.0, 2.0, -0.5])
    axis /= np.linalg.norm(axis)
    phi = axis * (np.pi - 1e-7)
    # arccos near -1 only resolves the angle to ~sqrt(eps)
    np.testing.assert_allclose(so3_exp(so3_log(so3_exp(phi))), so3_exp(phi), atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=12, max_size=12), st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_pose_group_properties(a, b):
    p = se3_exp(a[:6])
    q = se3_exp(a[6:])
    r = se3_exp(b)
    assert p.is_valid()
    lhs = ((p @ q) @ r).matrix()
    rhs = (p @ (q @ r)).matrix()
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    np.testing.assert_allclose((p @ p.inverse()).matrix(), np.eye(4), atol=1e-9)


def test_pose_apply_inverse(rng):
    p = random_pose(rng)
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(p.apply_inverse(p.apply(x)), x, atol=1e-12)
    np.testing.assert_allclose(p.apply(x), x @ p.matrix()[:3, :3].T + p.matrix()[:3, 3], atol=1e-12)


def test_pose_validity_flag():
    assert not Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()
    assert not Pose(np.eye(3) * 1.01, np.zeros(3)).is_valid()
    assert Pose.identity().is_valid()


def test_quaternion_roundtrip(rng):
    p = random_pose(rng)
    q = Pose.from_quaternion_xyzw(p.quaternion_xyzw(), p.translation)
    np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-12)


def test_warp_identity(intr_small, rng):
    p = random_pose(rng)
    q_w, d_w = warp_pixel((37.25, 81.5), 1.7, p, p, intr_small)
    np.testing.assert_allclose(q_w, [37.25, 81.5], atol=1e-9)
    assert abs(d_w - 1.7) < 1e-9


def test_warp_translation_example(intr_small):
    # camera w shifted 0.1 m along camera x: a point at depth 1 moves 10 px left
    pc = Pose.identity()
    pw = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
    q_w, d_w = warp_pixel((80.0, 60.0), 1.0, pc, pw, intr_small)
    np.testing.assert_allclose(q_w, [70.0, 60.0], atol=1e-12)
    assert d_w == pytest.approx(1.0)


def test_warp_out_of_view(intr_small):
    pc = Pose.identity()
    behind = Pose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
    assert warp_pixel((80.0, 60.0), 1.0, pc, behind, intr_small) is None
    far_left = Pose(np.eye(3), np.array([5.0, 0.0, 0.0]))
    assert warp_pixel((80.0, 60.0), 1.0, pc, far_left, intr_small) is None
    with pytest.raises(InvalidDepthError):
        warp_pixel((80.0, 60.0), 0.0, pc, pc, intr_small)


def test_warp_points_matches_formula(intr_small, rng):
    pc, pw = random_pose(rng, 0.1, 0.1), random_pose(rng, 0.1, 0.1)
    pix = rng.uniform([0, 0], [160, 120], size=(50, 2))
    d = rng.uniform(0.5, 3.0, 50)
    q, z, _ = warp_points(pix, d, pc, pw, intr_small)
    K = intr_small.K
    for i in range(50):
        h = np.array([pix[i, 0], pix[i, 1], 1.0])
        x = pw.rotation.T @ (pc.rotation @ intr_small.K_inv @ h * d[i] + pc.translation - pw.translation)
        proj = K @ x
        np.testing.assert_allclose(q[i], proj[:2] / proj[2], atol=1e-9)
        assert z[i] == pytest.approx(x[2], abs=1e-12)


def test_frame_validation(intr_small):
    with pytest.raises(ValueError):
        Frame(0, 0.0, np.zeros((120, 160, 3)), -np.ones((120, 160)))
    with pytest.raises(ValueError):
        Frame(0, 0.0, np.zeros((10, 10, 3)), np.zeros((120, 160)))
    f = Frame(0, 0.0, np.zeros((100, 160, 3)), np.zeros((100, 160)))
    with pytest.raises(ValueError):
        f.check(intr_small)
