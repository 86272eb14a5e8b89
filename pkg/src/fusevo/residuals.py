"""Photometric and geometric residual blocks, their analytic Jacobians, and
the robust weights.

State increments are 8-vectors ``(tr, rot, a, b)`` applied on the left of the
relative pose (see :mod:`fusevo.geometry`), so every Jacobian here is taken
at the current state with the increment at zero.  ``un, vn`` denote
normalized coordinates in the *target* frame and ``iz`` the target-frame
inverse depth — the three quantities the warp kernels hand back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptySystem
from .features import PATTERN_OFFSETS, Feature
from .geometry import AffineBrightness, CameraIntrinsics, FrameState
from .pyramid import ImagePlane

__all__ = [
    "PhotometricBlock",
    "GeometricBlock",
    "ResidualSystem",
    "huber_weight",
    "huber_weights",
    "depth_variance_weight",
    "estimate_variances",
    "robust_sigma2",
    "pose_jacobian_rows",
    "photometric_residual",
    "geometric_residual",
    "PhotometricBundle",
    "GeometricBundle",
    "level_coords",
]

_OFF_U = np.ascontiguousarray(PATTERN_OFFSETS[:, 0])
_OFF_V = np.ascontiguousarray(PATTERN_OFFSETS[:, 1])
P_SIZE = len(PATTERN_OFFSETS)


def level_coords(p: np.ndarray, level: int) -> np.ndarray:
    """Level-0 pixel-center coordinates mapped to pyramid level ``level``."""
    if level == 0:
        return np.asarray(p, dtype=np.float64)
    s = float(2**level)
    return (np.asarray(p, dtype=np.float64) + 0.5) / s - 0.5


def huber_weight(e: float, gamma: float) -> float:
    """IRLS weight of the Huber norm on a squared error ``e``."""
    if e < gamma * gamma:
        return 1.0
    return gamma / math.sqrt(e)


def huber_weights(e: np.ndarray, gamma: float) -> np.ndarray:
    g2 = gamma * gamma
    return np.where(e < g2, 1.0, gamma / np.sqrt(np.maximum(e, g2)))


def depth_variance_weight(sigma_d2: float, max_inv_var: float) -> float:
    """Down-weight by inverse-depth confidence: (1/sigma^2) / max(1/sigma^2)."""
    if sigma_d2 <= 0.0:
        raise ValueError("depth variance must be positive")
    inv = 1.0 / sigma_d2
    if max_inv_var < inv:
        raise ValueError("max_inv_var must dominate this feature's 1/sigma^2")
    return inv / max_inv_var


def robust_sigma2(values: np.ndarray, floor: float) -> float:
    """MAD-based variance estimate, floored: (1.4826 * MAD)^2."""
    if values.size == 0:
        return floor
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    return max(floor, (1.4826 * mad) ** 2)


def pose_jacobian_rows(
    fu: float, fv: float, un: np.ndarray, vn: np.ndarray, iz: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """d(pixel)/d(xi) rows for a left increment, any broadcastable shape.

    Returns (Ju, Jv), each ``un.shape + (6,)``, columns ordered
    (tx, ty, tz, wx, wy, wz).
    """
    Z = np.zeros_like(un)
    Ju = np.stack(
        [fu * iz, Z, -fu * un * iz, -fu * un * vn, fu * (1.0 + un * un), -fu * vn],
        axis=-1,
    )
    Jv = np.stack(
        [Z, fv * iz, -fv * vn * iz, -fv * (1.0 + vn * vn), fv * un * vn, fv * un],
        axis=-1,
    )
    return Ju, Jv


@dataclass
class PhotometricBlock:
    """Stacked pattern-point brightness residuals of one feature."""

    r: np.ndarray  # (P,)
    J: np.ndarray  # (P, 8)
    w: float
    valid: bool

    @property
    def energy(self) -> float:
        return float(self.r @ self.r)


@dataclass
class GeometricBlock:
    """Reprojection residual of one matched corner."""

    r: np.ndarray  # (2,)
    J: np.ndarray  # (2, 8)
    w: float
    valid: bool

    @property
    def energy(self) -> float:
        return float(self.r @ self.r)


def photometric_residual(
    p: np.ndarray,
    idepth: float,
    patch: np.ndarray,
    host_affine: AffineBrightness,
    cur: ImagePlane,
    state: FrameState,
    c: CameraIntrinsics,
    gamma_p: float = 9.0,
    border: float = 3.0,
    z_min: float = 1e-4,
) -> PhotometricBlock:
    """Brightness residual block of one feature at one pyramid level.

    ``p`` and ``patch`` must already live at the level described by ``c`` and
    ``cur``.  Invalid (any pattern point out of the bordered image or behind
    the near plane) comes back flagged, zeroed, weight 0 — never an exception,
    so the optimizer can count drops.
    """
    pose = state.pose()
    gain = state.affine.gain_from(host_affine)
    xn = ((p[0] + _OFF_U) - c.cu) / c.fu
    yn = ((p[1] + _OFF_V) - c.cv) / c.fv
    res, gu, gv, un, vn, iz, valid = kernels.photometric_blocks(
        cur.intensities,
        cur.grad_u,
        cur.grad_v,
        c.fu,
        c.fv,
        c.cu,
        c.cv,
        np.ascontiguousarray(pose.rotation),
        np.ascontiguousarray(pose.translation),
        gain,
        host_affine.b,
        state.affine.b,
        xn[None, :],
        yn[None, :],
        np.asarray(patch, dtype=np.float64)[None, :],
        np.array([idepth]),
        border,
        z_min,
        True,
    )
    ok = bool(valid[0])
    if not ok:
        return PhotometricBlock(np.zeros(P_SIZE), np.zeros((P_SIZE, 8)), 0.0, False)
    J = _photometric_jacobian(
        c.fu, c.fv, gu[0], gv[0], un[0], vn[0], iz[0], gain, patch, host_affine.b
    )
    w = huber_weight(float(res[0] @ res[0]), gamma_p)
    return PhotometricBlock(res[0], J, w, True)


def _photometric_jacobian(fu, fv, gu, gv, un, vn, iz, gain, patch, b_host):
    """(..., 8) rows: image gradient chained through the pose columns, then
    d/da = -gain*(I_host - b_host), d/db = -1."""
    Ju, Jv = pose_jacobian_rows(fu, fv, un, vn, iz)
    pose_cols = gu[..., None] * Ju + gv[..., None] * Jv
    da = -gain * (np.asarray(patch, dtype=np.float64) - b_host)
    db = -np.ones_like(da)
    return np.concatenate([pose_cols, da[..., None], db[..., None]], axis=-1)


def geometric_residual(
    feature: Feature,
    obs: np.ndarray,
    state: FrameState,
    c: CameraIntrinsics,
    w_d: float = 1.0,
    gamma_g: float = 1.5,
    z_min: float = 1e-4,
) -> GeometricBlock:
    """Reprojection residual ``warp(p) - obs`` of one matched corner.

    Valid as long as the warped point stays in front of the near plane; the
    pixel may leave the image (a far-off reprojection is exactly when this
    term must keep pulling).  Columns 7-8 of the Jacobian are zero: the
    residual is invariant to the affine brightness parameters.
    """
    pose = state.pose()
    xn = np.array([(feature.p[0] - c.cu) / c.fu])
    yn = np.array([(feature.p[1] - c.cv) / c.fv])
    pu, pv, un, vn, iz, ok = kernels.warp_points(
        c.fu,
        c.fv,
        c.cu,
        c.cv,
        np.ascontiguousarray(pose.rotation),
        np.ascontiguousarray(pose.translation),
        xn,
        yn,
        np.array([feature.idepth]),
        z_min,
    )
    if not ok[0]:
        return GeometricBlock(np.zeros(2), np.zeros((2, 8)), 0.0, False)
    r = np.array([pu[0] - obs[0], pv[0] - obs[1]])
    Ju, Jv = pose_jacobian_rows(c.fu, c.fv, un[:1], vn[:1], iz[:1])
    J = np.zeros((2, 8))
    J[0, :6] = Ju[0]
    J[1, :6] = Jv[0]
    w = w_d * huber_weight(float(r @ r), gamma_g)
    return GeometricBlock(r, J, w, True)


class PhotometricBundle:
    """All photometric features of one host keyframe, prepared per level.

    Preparation samples the host patches and normalized rays once; each LM
    iteration then only warps and samples the target image via the kernel.
    """

    def __init__(
        self,
        host_plane: ImagePlane,
        c: CameraIntrinsics,
        points: np.ndarray,
        idepth: np.ndarray,
        border: float = 3.0,
    ):
        n = len(points)
        self.c = c
        self.idepth = np.ascontiguousarray(idepth, dtype=np.float64)
        uu = points[:, 0][:, None] + _OFF_U[None, :]
        vv = points[:, 1][:, None] + _OFF_V[None, :]
        self.xn = np.ascontiguousarray((uu - c.cu) / c.fu)
        self.yn = np.ascontiguousarray((vv - c.cv) / c.fv)
        self.ref, host_ok = kernels.sample_patches(
            host_plane.intensities,
            np.ascontiguousarray(points[:, 0], dtype=np.float64),
            np.ascontiguousarray(points[:, 1], dtype=np.float64),
            _OFF_U,
            _OFF_V,
            1.0,
        )
        self.host_ok = host_ok.astype(bool)
        self.size = n
        self.border = float(border)

    def evaluate(
        self,
        target: ImagePlane,
        state: FrameState,
        host_affine: AffineBrightness,
        gamma_p: float,
        z_min: float,
        with_grads: bool = True,
    ):
        """Residuals (and optionally Jacobians) against a target plane."""
        pose = state.pose()
        gain = state.affine.gain_from(host_affine)
        res, gu, gv, un, vn, iz, valid = kernels.photometric_blocks(
            target.intensities,
            target.grad_u,
            target.grad_v,
            self.c.fu,
            self.c.fv,
            self.c.cu,
            self.c.cv,
            np.ascontiguousarray(pose.rotation),
            np.ascontiguousarray(pose.translation),
            gain,
            host_affine.b,
            state.affine.b,
            self.xn,
            self.yn,
            self.ref,
            self.idepth,
            self.border,
            z_min,
            with_grads,
        )
        valid = valid.astype(bool) & self.host_ok
        res[~valid] = 0.0
        energies = (res * res).sum(axis=1)
        w = np.where(valid, huber_weights(energies, gamma_p), 0.0)
        J = None
        if with_grads:
            J = _photometric_jacobian(
                self.c.fu, self.c.fv, gu, gv, un, vn, iz,
                gain, self.ref, host_affine.b,
            )
            J[~valid] = 0.0
        return PhotometricResiduals(res, J, w, valid, energies)


@dataclass
class PhotometricResiduals:
    r: np.ndarray  # (N, P)
    J: np.ndarray | None  # (N, P, 8)
    w: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool
    energies: np.ndarray  # (N,)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def blocks(self) -> list[PhotometricBlock]:
        J = self.J if self.J is not None else np.zeros(self.r.shape + (8,))
        return [
            PhotometricBlock(self.r[i], J[i], float(self.w[i]), bool(self.valid[i]))
            for i in range(len(self.r))
        ]


class GeometricBundle:
    """All matched corners of one host keyframe at one level.

    Observations are matched once at level 0 and rescaled per level; the
    depth-variance weights are normalized over the bundle (the best-known
    feature gets weight 1).
    """

    def __init__(
        self,
        c: CameraIntrinsics,
        points0: np.ndarray,
        idepth: np.ndarray,
        obs0: np.ndarray,
        idepth_variance: np.ndarray,
        level: int = 0,
    ):
        self.c = c.at_level(level)
        pts = level_coords(points0, level)
        self.xn = np.ascontiguousarray((pts[:, 0] - self.c.cu) / self.c.fu)
        self.yn = np.ascontiguousarray((pts[:, 1] - self.c.cv) / self.c.fv)
        self.idepth = np.ascontiguousarray(idepth, dtype=np.float64)
        self.obs = level_coords(obs0, level)
        inv_var = 1.0 / np.asarray(idepth_variance, dtype=np.float64)
        self.w_d = inv_var / inv_var.max() if len(inv_var) else inv_var
        self.size = len(points0)

    def evaluate(self, state: FrameState, gamma_g: float, z_min: float):
        pose = state.pose()
        pu, pv, un, vn, iz, ok = kernels.warp_points(
            self.c.fu,
            self.c.fv,
            self.c.cu,
            self.c.cv,
            np.ascontiguousarray(pose.rotation),
            np.ascontiguousarray(pose.translation),
            self.xn,
            self.yn,
            self.idepth,
            z_min,
        )
        valid = ok.astype(bool)
        r = np.stack([pu - self.obs[:, 0], pv - self.obs[:, 1]], axis=1)
        r[~valid] = 0.0
        Ju, Jv = pose_jacobian_rows(self.c.fu, self.c.fv, un, vn, iz)
        J = np.zeros((self.size, 2, 8))
        J[:, 0, :6] = Ju
        J[:, 1, :6] = Jv
        J[~valid] = 0.0
        energies = (r * r).sum(axis=1)
        w = np.where(valid, self.w_d * huber_weights(energies, gamma_g), 0.0)
        return GeometricResiduals(r, J, w, valid, energies)


@dataclass
class GeometricResiduals:
    r: np.ndarray  # (M, 2)
    J: np.ndarray  # (M, 2, 8)
    w: np.ndarray  # (M,)
    valid: np.ndarray  # (M,) bool
    energies: np.ndarray  # (M,)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def blocks(self) -> list[GeometricBlock]:
        return [
            GeometricBlock(self.r[i], self.J[i], float(self.w[i]), bool(self.valid[i]))
            for i in range(len(self.r))
        ]


@dataclass
class ResidualSystem:
    """Everything one joint step consumes: both residual families plus the
    normalization statistics of the scalarized energy."""

    phot: PhotometricResiduals | None
    geo: GeometricResiduals | None
    n_p: int = 0
    n_g: int = 0
    sigma2_p: float = 1.0
    sigma2_g: float = 1.0

    @property
    def photometric(self) -> list[PhotometricBlock]:
        return self.phot.blocks() if self.phot is not None else []

    @property
    def geometric(self) -> list[GeometricBlock]:
        return self.geo.blocks() if self.geo is not None else []

    def energy(self, K: float) -> float:
        """Scalarized robust energy: e_p/(n_p sigma_p^2) + K e_g/(n_g sigma_g^2)."""
        total = 0.0
        if self.phot is not None and self.n_p > 0:
            ep = float((self.phot.w * self.phot.energies)[self.phot.valid].sum())
            total += ep / (self.n_p * self.sigma2_p)
        if self.geo is not None and self.n_g > 0:
            eg = float((self.geo.w * self.geo.energies)[self.geo.valid].sum())
            total += K * eg / (self.n_g * self.sigma2_g)
        return total


def estimate_variances(
    sys: ResidualSystem, floor: float = 1e-4
) -> tuple[float, float]:
    """Robust per-type residual variances (MAD), floored; also fixes n_p/n_g.

    Photometric statistics pool the stacked pattern-point residuals;
    geometric ones pool the stacked scalar components.
    """
    any_p = sys.phot is not None and sys.phot.valid.any()
    any_g = sys.geo is not None and sys.geo.valid.any()
    if not any_p and not any_g:
        raise EmptySystem("no valid residual blocks of either type")
    sys.n_p = sys.phot.n_valid if sys.phot is not None else 0
    sys.n_g = sys.geo.n_valid if sys.geo is not None else 0
    sys.sigma2_p = robust_sigma2(
        sys.phot.r[sys.phot.valid].ravel() if any_p else np.empty(0), floor
    )
    sys.sigma2_g = robust_sigma2(
        sys.geo.r[sys.geo.valid].ravel() if any_g else np.empty(0), floor
    )
    return sys.sigma2_p, sys.sigma2_g
