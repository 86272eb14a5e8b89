"""Lie-group and camera-model tests.

The exp maps are checked against a truncated matrix-power series (the
textbook definition) before anything downstream relies on them.
"""

import numpy as np
import pytest

from fusevo.errors import AngleNearPi, BehindCamera, NonPositiveDepth
from fusevo.geometry import (
    AffineBrightness,
    CameraIntrinsics,
    FrameState,
    Pose,
    boxplus,
    hat,
    oplus,
    se3_exp,
    se3_log,
    so3_exp,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    warp,
)

RNG = np.random.default_rng(240817)


def _expm(A: np.ndarray, terms: int = 20) -> np.ndarray:
    """Matrix exponential by its power series — the series the closed forms
    must reproduce.  20 terms reach float64 roundoff for the angles used."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def _se3_hat(xi: np.ndarray) -> np.ndarray:
    T = np.zeros((4, 4))
    T[:3, :3] = hat(xi[3:])
    T[:3, 3] = xi[:3]
    return T


def _random_twists(n, max_angle=3.0, max_trans=2.0):
    out = []
    for _ in range(n):
        w = RNG.normal(size=3)
        norm = np.linalg.norm(w)
        w = w / norm * RNG.uniform(1e-3, max_angle)
        v = RNG.uniform(-max_trans, max_trans, size=3)
        out.append(np.concatenate([v, w]))
    return out


# -- series oracles ------------------------------------------------------


def test_so3_exp_matches_series():
    for _ in range(50):
        w = RNG.normal(size=3)
        w = w / np.linalg.norm(w) * RNG.uniform(1e-6, 3.0)
        assert np.allclose(so3_exp(w), _expm(hat(w)), atol=1e-12)


def test_so3_exp_small_angle_branch_matches_series():
    for scale in (1e-12, 1e-10, 1e-9, 5e-9):
        w = RNG.normal(size=3)
        w = w / np.linalg.norm(w) * scale
        assert np.allclose(so3_exp(w), _expm(hat(w)), atol=1e-15)


def test_se3_exp_matches_series():
    for xi in _random_twists(50):
        T = se3_exp(xi)
        M = _expm(_se3_hat(xi))
        assert np.allclose(T.rotation, M[:3, :3], atol=1e-12)
        assert np.allclose(T.translation, M[:3, 3], atol=1e-12)


def test_se3_exp_small_angle_matches_series():
    for scale in (1e-12, 1e-9, 1e-7):
        xi = np.concatenate([RNG.uniform(-1, 1, 3), RNG.normal(size=3) * scale])
        T = se3_exp(xi)
        M = _expm(_se3_hat(xi))
        assert np.allclose(T.rotation, M[:3, :3], atol=1e-14)
        assert np.allclose(T.translation, M[:3, 3], atol=1e-14)


def test_left_jacobian_matches_series():
    # J_l(w) = sum_k (hat w)^k / (k+1)!
    for _ in range(20):
        w = RNG.normal(size=3)
        w = w / np.linalg.norm(w) * RNG.uniform(1e-5, 3.0)
        J = np.eye(3)
        term = np.eye(3)
        for k in range(1, 20):
            term = term @ hat(w) / (k + 1)
            J = J + term
        assert np.allclose(so3_left_jacobian(w), J, atol=1e-12)
        assert np.allclose(
            so3_left_jacobian_inv(w) @ so3_left_jacobian(w), np.eye(3), atol=1e-10
        )


# -- round trips and branches --------------------------------------------


def test_log_exp_round_trip():
    for xi in _random_twists(100, max_angle=3.1):
        assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_so3_log_returns_principal_branch():
    w = np.array([0.3, -0.2, 0.5])
    w = w / np.linalg.norm(w) * (np.pi + 0.4)  # beyond pi wraps around
    back = so3_log(so3_exp(w))
    assert np.linalg.norm(back) <= np.pi + 1e-12
    assert np.allclose(so3_exp(back), so3_exp(w), atol=1e-12)


def test_so3_log_near_pi_raises():
    w = np.array([1.0, 0.0, 0.0]) * (np.pi - 1e-10)
    with pytest.raises(AngleNearPi):
        so3_log(so3_exp(w))


def test_exp_identity():
    T = se3_exp(np.zeros(6))
    assert np.allclose(T.rotation, np.eye(3))
    assert np.allclose(T.translation, 0.0)


# -- group structure ------------------------------------------------------


def test_compose_apply_inverse_agree_with_matrices():
    for _ in range(20):
        a, b = se3_exp(_random_twists(1)[0]), se3_exp(_random_twists(1)[0])
        Mab = a.matrix() @ b.matrix()
        ab = a.compose(b)
        assert np.allclose(ab.matrix(), Mab, atol=1e-12)
        assert np.allclose(
            a.inverse().matrix() @ a.matrix(), np.eye(4), atol=1e-12
        )
        pts = RNG.normal(size=(7, 3))
        hom = np.concatenate([pts, np.ones((7, 1))], axis=1)
        assert np.allclose(a.apply(pts), (a.matrix() @ hom.T).T[:, :3], atol=1e-12)


def test_boxplus_is_left_increment():
    xi = _random_twists(1)[0] * 0.1
    T = se3_exp(_random_twists(1)[0])
    assert np.allclose(
        boxplus(xi, T).matrix(), se3_exp(xi).compose(T).matrix(), atol=1e-12
    )


def test_oplus_updates_pose_left_and_affine_additively():
    state = FrameState(
        _random_twists(1)[0] * 0.2, AffineBrightness(0.05, -1.0, 1.2)
    )
    delta = np.concatenate([_random_twists(1)[0] * 0.01, [0.02, 0.3]])
    new = oplus(delta, state)
    expect = se3_exp(delta[:6]).compose(state.pose())
    assert np.allclose(new.pose().matrix(), expect.matrix(), atol=1e-10)
    assert new.affine.a == pytest.approx(state.affine.a + 0.02)
    assert new.affine.b == pytest.approx(state.affine.b + 0.3)
    assert new.affine.exposure == state.affine.exposure


def test_affine_gain():
    host = AffineBrightness(0.1, 2.0, 0.8)
    tgt = AffineBrightness(-0.2, 0.5, 1.1)
    expect = (1.1 * np.exp(-0.2)) / (0.8 * np.exp(0.1))
    assert tgt.gain_from(host) == pytest.approx(expect, rel=1e-12)


# -- camera model ----------------------------------------------------------


def _intr():
    return CameraIntrinsics(300.0, 310.0, 160.0, 120.0, 320, 240)


def test_project_backproject_round_trip():
    c = _intr()
    for _ in range(50):
        pix = RNG.uniform([0, 0], [319, 239])
        rho = RNG.uniform(0.2, 5.0)
        assert np.allclose(c.project(c.backproject(pix, rho)), pix, atol=1e-10)


def test_project_behind_camera_raises():
    with pytest.raises(BehindCamera):
        _intr().project(np.array([0.0, 0.0, -1.0]))
    with pytest.raises(NonPositiveDepth):
        _intr().backproject(np.array([10.0, 10.0]), 0.0)


def test_level_intrinsics_pixel_center_convention():
    c = _intr()
    c1 = c.at_level(1)
    assert c1.width == 160 and c1.height == 120
    assert c1.fu == pytest.approx(150.0)
    # the center of level-1 pixel k covers level-0 pixels 2k, 2k+1
    assert c1.cu == pytest.approx((c.cu + 0.5) / 2 - 0.5)
    assert c1.cv == pytest.approx((c.cv + 0.5) / 2 - 0.5)


def test_contains_border():
    c = _intr()
    assert c.contains(np.array([3.0, 3.0]), border=3.0)
    assert not c.contains(np.array([2.9, 3.0]), border=3.0)
    assert not c.contains(np.array([317.0, 100.0]), border=3.0)


def test_warp_identity_is_fixed_point():
    c = _intr()
    state = FrameState.identity()
    pix = np.array([100.0, 80.0])
    target, iz = warp(c, state, pix, idepth=0.5, border=0.0, z_min=1e-4)
    assert np.allclose(target, pix, atol=1e-12)
    assert iz == pytest.approx(0.5)


def test_warp_matches_manual_chain():
    c = _intr()
    xi = np.array([0.02, -0.01, 0.03, 0.004, -0.002, 0.008])
    state = FrameState(xi, AffineBrightness())
    pix = np.array([210.0, 40.0])
    rho = 0.7
    X = c.backproject(pix, rho)
    Y = state.pose().apply(X)
    expect = c.project(Y)
    got, iz = warp(c, state, pix, idepth=rho, border=0.0, z_min=1e-4)
    assert np.allclose(got, expect, atol=1e-12)
    assert iz == pytest.approx(1.0 / Y[2], rel=1e-12)
