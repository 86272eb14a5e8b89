"""Vectorized numpy implementations of the hot per-point kernels.

This is the reference backend: every function here has a compiled twin in
``_core.pyx`` with the same signature and bit-compatible semantics (same
branch structure, same clamping).  Tests and the benchmark rely on the two
agreeing to float tolerance.

Conventions shared by both backends:
  * images are C-contiguous float64 (H, W), pixel centers at integer coords;
  * the valid bilinear domain is [0, W-1] x [0, H-1], shrunk by ``border``;
  * invalid outputs are zeroed, never NaN, and flagged via uint8 masks.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "sample_patches",
    "warp_points",
    "photometric_blocks",
    "fast_corners",
    "epipolar_ssd",
]


def _bilinear(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear gather at in-bounds subpixel positions (no checking here)."""
    h, w = plane.shape
    u0 = np.minimum(np.floor(u).astype(np.int64), w - 2)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
    fu = u - u0
    fv = v - v0
    p00 = plane[v0, u0]
    p01 = plane[v0, u0 + 1]
    p10 = plane[v0 + 1, u0]
    p11 = plane[v0 + 1, u0 + 1]
    return (1 - fv) * ((1 - fu) * p00 + fu * p01) + fv * ((1 - fu) * p10 + fu * p11)


def sample_patches(
    plane: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    off_u: np.ndarray,
    off_v: np.ndarray,
    border: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Patch intensities around N centers; a patch is valid only whole."""
    h, w = plane.shape
    uu = u[:, None] + off_u[None, :]
    vv = v[:, None] + off_v[None, :]
    ok = (
        (uu >= border)
        & (uu <= w - 1 - border)
        & (vv >= border)
        & (vv <= h - 1 - border)
    ).all(axis=1)
    vals = np.zeros(uu.shape)
    if ok.any():
        vals[ok] = _bilinear(plane, uu[ok], vv[ok])
    return vals, ok.astype(np.uint8)


def warp_points(
    fu: float,
    fv: float,
    cu: float,
    cv: float,
    R: np.ndarray,
    t: np.ndarray,
    xn: np.ndarray,
    yn: np.ndarray,
    idepth: np.ndarray,
    z_min: float,
) -> tuple[np.ndarray, ...]:
    """Rigidly move rays ``(xn, yn, 1)/idepth`` and project.

    Returns (pu, pv, un, vn, iz, ok); un/vn are normalized target-frame
    coordinates and iz the target-frame inverse depth — the quantities the
    analytic Jacobians consume.  Image-bounds checking is the caller's.
    """
    X = np.stack([xn, yn, np.ones_like(xn)], axis=0) / idepth[None, :]
    Y = R @ X + t[:, None]
    z = Y[2]
    ok = z > z_min
    zsafe = np.where(ok, z, 1.0)
    un = np.where(ok, Y[0] / zsafe, 0.0)
    vn = np.where(ok, Y[1] / zsafe, 0.0)
    iz = np.where(ok, 1.0 / zsafe, 0.0)
    pu = np.where(ok, fu * un + cu, 0.0)
    pv = np.where(ok, fv * vn + cv, 0.0)
    return pu, pv, un, vn, iz, ok.astype(np.uint8)


def photometric_blocks(
    I: np.ndarray,
    Gu: np.ndarray,
    Gv: np.ndarray,
    fu: float,
    fv: float,
    cu: float,
    cv: float,
    R: np.ndarray,
    t: np.ndarray,
    gain: float,
    b_host: float,
    b_tgt: float,
    xn: np.ndarray,
    yn: np.ndarray,
    ref: np.ndarray,
    idepth: np.ndarray,
    border: float,
    z_min: float,
    with_grads: bool = True,
) -> tuple[np.ndarray, ...]:
    """Warp N features x P pattern points and evaluate brightness residuals.

    ``xn, yn`` are host-frame normalized ray coordinates per pattern point,
    ``ref`` the host intensities, ``idepth`` one inverse depth per feature.
    Residual: (I[p'] - b_tgt) - gain * (ref - b_host).  A block is valid only
    if every pattern point lands inside the bordered image in front of the
    near plane.  Returns (res, gu, gv, un, vn, iz, valid).
    """
    N, P = xn.shape
    h, w = I.shape
    X = np.stack([xn, yn, np.ones((N, P))], axis=-1) / idepth[:, None, None]
    Y = X @ R.T + t[None, None, :]
    z = Y[..., 2]
    okz = z > z_min
    zsafe = np.where(okz, z, 1.0)
    un = Y[..., 0] / zsafe
    vn = Y[..., 1] / zsafe
    pu = fu * un + cu
    pv = fv * vn + cv
    inb = (
        okz
        & (pu >= border)
        & (pu <= w - 1 - border)
        & (pv >= border)
        & (pv <= h - 1 - border)
    )
    valid = inb.all(axis=1)
    res = np.zeros((N, P))
    gu = np.zeros((N, P))
    gv = np.zeros((N, P))
    if valid.any():
        us, vs = pu[valid], pv[valid]
        res[valid] = (_bilinear(I, us, vs) - b_tgt) - gain * (ref[valid] - b_host)
        if with_grads:
            gu[valid] = _bilinear(Gu, us, vs)
            gv[valid] = _bilinear(Gv, us, vs)
    keep = valid[:, None] & okz
    un = np.where(keep, un, 0.0)
    vn = np.where(keep, vn, 0.0)
    iz = np.where(keep, 1.0 / zsafe, 0.0)
    return res, gu, gv, un, vn, iz, valid.astype(np.uint8)


# Bresenham circle of radius 3, clockwise from 12 o'clock: (du, dv) offsets.
FAST_RING = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1),
        (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1),
        (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)

_ARC = 9  # contiguous run length for the segment test


def _has_run(flags: np.ndarray) -> np.ndarray:
    """Any circular run of >= _ARC consecutive True along axis 0 (len 16)."""
    doubled = np.concatenate([flags, flags[: _ARC - 1]], axis=0)
    out = np.zeros(flags.shape[1:], dtype=bool)
    for s in range(16):
        out |= doubled[s : s + _ARC].all(axis=0)
    return out


def fast_corners(I: np.ndarray, threshold: float, margin: int = 3) -> np.ndarray:
    """Segment-test corners: >= 9 contiguous ring pixels all brighter than
    center + threshold or all darker than center - threshold.

    Returns (M, 2) int32 pixel coordinates (u, v), row-major order.
    """
    h, w = I.shape
    m = max(3, int(margin))
    if h - 2 * m <= 0 or w - 2 * m <= 0:
        return np.zeros((0, 2), dtype=np.int32)
    C = I[m : h - m, m : w - m]
    bright = np.empty((16,) + C.shape, dtype=bool)
    dark = np.empty_like(bright)
    for k, (du, dv) in enumerate(FAST_RING):
        S = I[m + dv : h - m + dv, m + du : w - m + du]
        bright[k] = S > C + threshold
        dark[k] = S < C - threshold
    mask = _has_run(bright) | _has_run(dark)
    vs, us = np.nonzero(mask)
    return np.stack([us + m, vs + m], axis=1).astype(np.int32)


def epipolar_ssd(
    I: np.ndarray,
    pu: np.ndarray,
    pv: np.ndarray,
    ref: np.ndarray,
    off_u: np.ndarray,
    off_v: np.ndarray,
    gain: float,
    b_host: float,
    b_tgt: float,
    border: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Summed squared brightness residual of one reference patch at M
    candidate positions.  Invalid positions score +inf."""
    h, w = I.shape
    uu = pu[:, None] + off_u[None, :]
    vv = pv[:, None] + off_v[None, :]
    ok = (
        (uu >= border)
        & (uu <= w - 1 - border)
        & (vv >= border)
        & (vv <= h - 1 - border)
    ).all(axis=1)
    ssd = np.full(pu.shape, np.inf)
    if ok.any():
        r = (_bilinear(I, uu[ok], vv[ok]) - b_tgt) - gain * (ref[None, :] - b_host)
        ssd[ok] = (r * r).sum(axis=1)
    return ssd, ok.astype(np.uint8)
