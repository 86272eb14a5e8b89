"""Keyframe lifecycle: candidate depth filtering, keyframe decision, windowed
photometric bundle adjustment (Schur-eliminated depths), structure-only
refinement of marginalized corners, and keyframe marginalization."""

from __future__ import annotations

import contextlib
import enum
import math
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import Config
from .errors import SingularHessian
from .features import (
    PATTERN_OFFSETS,
    PATTERN_SIZE,
    Feature,
    FeatureKind,
    FeatureStatus,
    OccupancyGrid,
    activate_features,
    detect_corners,
    sample_pixel_candidates,
    update_occupancy,
)
from .geometry import AffineBrightness, CameraIntrinsics, FrameState, Pose
from .pyramid import ImagePyramid
from .residuals import huber_weight, huber_weights
from .tracker import TrackResult, TrackingReference

__all__ = [
    "KeyframeKind",
    "Keyframe",
    "LocalMap",
    "Mapper",
    "keyframe_decision",
    "update_candidate_depths",
    "photometric_ba",
    "structure_only_optimization",
    "marginalize",
]

_OFF_U = np.ascontiguousarray(PATTERN_OFFSETS[:, 0])
_OFF_V = np.ascontiguousarray(PATTERN_OFFSETS[:, 1])


class KeyframeKind(enum.Enum):
    HYBRID = "hybrid"
    INDIRECT = "indirect"


@dataclass
class Keyframe:
    """A map keyframe.  ``pose`` is world-to-camera; ``features`` are hosted
    here (their ``p`` lives in this keyframe's level-0 image)."""

    id: int
    pyramid: ImagePyramid
    pose: Pose
    affine: AffineBrightness
    features: list[Feature] = field(default_factory=list)
    kind: KeyframeKind = KeyframeKind.HYBRID

    def demote(self) -> None:
        if self.kind is KeyframeKind.INDIRECT:
            raise ValueError("keyframe kind only transitions Hybrid -> Indirect")
        self.kind = KeyframeKind.INDIRECT

    def active_features(self) -> list[Feature]:
        return [f for f in self.features if f.status is FeatureStatus.ACTIVE]

    def candidates(self) -> list[Feature]:
        return [f for f in self.features if f.status is FeatureStatus.CANDIDATE]


@dataclass
class LocalMap:
    """Sliding window of hybrid keyframes plus demoted indirect keyframes."""

    window_size: int
    hybrid_window: list[Keyframe] = field(default_factory=list)
    indirect_set: list[Keyframe] = field(default_factory=list)
    grid: OccupancyGrid | None = None

    def newest(self) -> Keyframe:
        return self.hybrid_window[-1]

    def audit(self, cfg: Config) -> None:
        """Invariant check, raises AssertionError on violation.

        Checks window size, the indirect-sharing rule, and that no two
        active features' occupancy blocks overlap (pairwise center-cell
        Chebyshev distance >= 2) when projected into the newest keyframe.
        """
        assert len(self.hybrid_window) <= self.window_size, "window overflow"
        if not self.hybrid_window:
            return
        newest = self.newest()
        for kf in self.indirect_set:
            shared = any(
                newest.id in f.observations
                for f in kf.features
                if f.kind is FeatureKind.CORNER
                and f.status in (FeatureStatus.ACTIVE, FeatureStatus.MARGINALIZED)
            )
            assert shared, f"indirect keyframe {kf.id} shares no feature with newest"
        cells = []
        for kf in self.hybrid_window:
            rel = newest.pose.compose(kf.pose.inverse())
            for f in kf.active_features():
                p = _project_feature(f, rel, newest.pyramid.intrinsics[0])
                if p is not None and self.grid is not None and self.grid.in_image(p):
                    cells.append(self.grid.cell_of(p))
        for i in range(len(cells)):
            for j in range(i + 1, len(cells)):
                d = max(abs(cells[i][0] - cells[j][0]), abs(cells[i][1] - cells[j][1]))
                assert d >= 2, f"active features overlap: cells {cells[i]}, {cells[j]}"


def _project_feature(
    f: Feature, rel: Pose, c: CameraIntrinsics, z_min: float = 1e-4
) -> np.ndarray | None:
    n = np.array([(f.p[0] - c.cu) / c.fu, (f.p[1] - c.cv) / c.fv, 1.0])
    x = rel.rotation @ (n / f.idepth) + rel.translation
    if x[2] <= z_min:
        return None
    return np.array([c.fu * x[0] / x[2] + c.cu, c.fv * x[1] / x[2] + c.cv])


class RehostedFeature:
    """A map feature re-expressed in the newest keyframe's frame.

    The tracker needs every point's pixel and inverse depth relative to its
    reference keyframe; features hosted elsewhere get this thin view with
    the transformed (p, idepth).  Status and match bookkeeping write through
    to the underlying feature.
    """

    __slots__ = ("base", "p", "idepth", "idepth_variance")

    def __init__(self, base: Feature, p: np.ndarray, idepth: float):
        self.base = base
        self.p = p
        self.idepth = idepth
        self.idepth_variance = base.idepth_variance

    @property
    def kind(self):
        return self.base.kind

    @property
    def status(self):
        return self.base.status

    @property
    def descriptor(self):
        return self.base.descriptor

    @property
    def patch(self):
        return self.base.patch

    @property
    def observations(self):
        return self.base.observations

    @property
    def match_failures(self):
        return self.base.match_failures

    @match_failures.setter
    def match_failures(self, v):
        self.base.match_failures = v

    @property
    def phot_failures(self):
        return self.base.phot_failures

    @phot_failures.setter
    def phot_failures(self, v):
        self.base.phot_failures = v

    @property
    def num_observations(self):
        return self.base.num_observations

    @num_observations.setter
    def num_observations(self, v):
        self.base.num_observations = v

    def set_status(self, s) -> None:
        self.base.set_status(s)


def _rehost(f: Feature, rel: Pose, c: CameraIntrinsics, z_min: float):
    """(projected pixel, inverse depth) of ``f`` in the newest keyframe, or
    None when it falls behind the camera or outside the image."""
    n = np.array([(f.p[0] - c.cu) / c.fu, (f.p[1] - c.cv) / c.fv, 1.0])
    x = rel.rotation @ (n / f.idepth) + rel.translation
    if x[2] <= z_min:
        return None
    p = np.array([c.fu * x[0] / x[2] + c.cu, c.fv * x[1] / x[2] + c.cv])
    if not (0 <= p[0] <= c.width - 1 and 0 <= p[1] <= c.height - 1):
        return None
    return RehostedFeature(f, p, 1.0 / float(x[2]))


def keyframe_decision(
    track: TrackResult, ref: TrackingReference, cfg: Config
) -> bool:
    """True when flow + brightness change exceed 1, or when photometric
    support dropped below the configured fraction of the reference count."""
    flows = []
    c = ref.pyramid.intrinsics[0]
    rel = track.state.pose()
    for f in ref.phot_features:
        p = _project_feature(f, rel, c, cfg.z_min)
        if p is not None:
            flows.append(float((p[0] - f.p[0]) ** 2 + (p[1] - f.p[1]) ** 2))
    for m in track.matches:
        flows.append(float(np.sum((m.obs - m.feature.p) ** 2)))
    flow = math.sqrt(float(np.mean(flows))) if flows else 0.0
    da = abs(track.state.affine.a - ref.affine.a)
    if cfg.kf_flow_weight * flow + cfg.kf_affine_weight * da > 1.0:
        return True
    n_p = track.inlier_counts[-1][0] if track.inlier_counts else 0
    ref_count = len(ref.phot_features)
    return ref_count > 0 and n_p < cfg.kf_drop_ratio * ref_count


def update_candidate_depths(
    local_map: LocalMap,
    frame: ImagePyramid,
    state: FrameState,
    cfg: Config,
    sigma2_p: float = 1.0,
) -> None:
    """Epipolar inverse-depth filtering of every candidate against ``frame``.

    ``state`` is the frame's pose relative to the newest keyframe.  Per
    candidate: discrete pattern-SSD search along the epipolar segment of the
    [idepth +- 2 sigma] interval on the finest level, parabolic subpixel
    refinement, then a Gaussian fusion in inverse depth with observation
    variance 2 sigma_n^2 / curvature (floored).  Marks Outlier on a score
    above the energy gate or an interval entirely off-image; skips (keeps
    the hypothesis) on degenerate baseline or failed refinement.
    """
    newest = local_map.newest()
    T_f_w = state.pose().compose(newest.pose)
    plane = frame.levels[0]
    h, w = plane.intensities.shape
    gate = (cfg.outlier_energy_factor**2) * max(sigma2_p, cfg.variance_floor) * PATTERN_SIZE
    for kf in local_map.hybrid_window:
        rel = T_f_w.compose(kf.pose.inverse())
        if float(np.linalg.norm(rel.translation)) < cfg.b_min:
            continue  # no parallax from this host
        c = kf.pyramid.intrinsics[0]
        gain = state.affine.gain_from(kf.affine)
        for f in kf.candidates():
            _filter_candidate(f, rel, c, plane, gain, kf.affine.b, state.affine.b,
                              gate, cfg, (h, w))


def _filter_candidate(
    f: Feature,
    rel: Pose,
    c: CameraIntrinsics,
    plane,
    gain: float,
    b_host: float,
    b_tgt: float,
    gate: float,
    cfg: Config,
    shape: tuple[int, int],
) -> None:
    h, w = shape
    n = np.array([(f.p[0] - c.cu) / c.fu, (f.p[1] - c.cv) / c.fv, 1.0])
    Rn = rel.rotation @ n
    t = rel.translation
    sigma = math.sqrt(f.idepth_variance)
    rho_lo = max(f.idepth - 2.0 * sigma, 1e-8)
    rho_hi = f.idepth + 2.0 * sigma

    def project(rho: float) -> np.ndarray | None:
        x = Rn / rho + t
        if x[2] <= cfg.z_min:
            return None
        return np.array([c.fu * x[0] / x[2] + c.cu, c.fv * x[1] / x[2] + c.cv])

    p_lo, p_hi = project(rho_lo), project(rho_hi)
    if p_lo is None or p_hi is None:
        return
    seg = p_hi - p_lo
    length = float(np.hypot(seg[0], seg[1]))
    n_steps = int(min(max(2.0, math.ceil(length)), 100.0)) + 1
    ts = np.linspace(0.0, 1.0, n_steps)
    pu = np.ascontiguousarray(p_lo[0] + ts * seg[0])
    pv = np.ascontiguousarray(p_lo[1] + ts * seg[1])
    ssd, ok = kernels.epipolar_ssd(
        plane.intensities, pu, pv, np.ascontiguousarray(f.patch),
        _OFF_U, _OFF_V, gain, b_host, b_tgt, float(cfg.border),
    )
    if not ok.any():
        # search interval entirely off-image
        f.set_status(FeatureStatus.OUTLIER)
        return
    i = int(np.argmin(ssd))
    best = float(ssd[i])
    if best > gate:
        f.set_status(FeatureStatus.OUTLIER)
        return
    # parabolic refinement over the best sample and its neighbors
    if not (0 < i < n_steps - 1) or not (np.isfinite(ssd[i - 1]) and np.isfinite(ssd[i + 1])):
        return
    s_m, s_0, s_p = float(ssd[i - 1]), best, float(ssd[i + 1])
    curv = s_m - 2.0 * s_0 + s_p
    if curv <= 1e-12:
        return
    delta = 0.5 * (s_m - s_p) / curv
    delta = max(-1.0, min(1.0, delta))
    t_star = float(ts[i] + delta * (ts[1] - ts[0]))
    u_obs = p_lo[0] + t_star * seg[0]
    v_obs = p_lo[1] + t_star * seg[1]
    rho_obs = _solve_idepth(Rn, t, (u_obs - c.cu) / c.fu, (v_obs - c.cv) / c.fv)
    if rho_obs is None or rho_obs <= 0.0:
        return
    # observation variance: Laplace approximation at the parabola minimum,
    # converted from pixels^2 along the segment to inverse-depth^2
    step_px = length / (n_steps - 1)
    var_px = 2.0 * cfg.depth_obs_sigma**2 / (curv / step_px**2)
    slope = (rho_hi - rho_lo) / max(length, 1e-9)
    var_obs = max(var_px * slope * slope, cfg.depth_var_floor)
    # Gaussian product fusion
    v0, v1 = f.idepth_variance, var_obs
    f.idepth = (f.idepth * v1 + rho_obs * v0) / (v0 + v1)
    f.idepth_variance = v0 * v1 / (v0 + v1)
    f.num_observations += 1


def _solve_idepth(Rn: np.ndarray, t: np.ndarray, u_n: float, v_n: float) -> float | None:
    """Host inverse depth whose warp hits normalized obs (u_n, v_n);
    picks the better-conditioned image axis."""
    den_u = u_n * t[2] - t[0]
    den_v = v_n * t[2] - t[1]
    if abs(den_u) >= abs(den_v):
        if abs(den_u) < 1e-12:
            return None
        return float((Rn[0] - u_n * Rn[2]) / den_u)
    if abs(den_v) < 1e-12:
        return None
    return float((Rn[1] - v_n * Rn[2]) / den_v)


# ---------------------------------------------------------------------------
# photometric bundle adjustment


class _BAProblem:
    """Index bookkeeping for the windowed BA: which states and depths are
    free, and the residual pairs (host kf, target kf)."""

    def __init__(self, local_map: LocalMap, cfg: Config):
        self.kfs = list(local_map.hybrid_window)
        if len(self.kfs) < 2:
            raise SingularHessian("bundle adjustment needs at least 2 keyframes")
        self.cfg = cfg
        self.free_kfs = self.kfs[1:]  # oldest keyframe is the gauge
        self.kf_index = {kf.id: i for i, kf in enumerate(self.free_kfs)}
        self.features: list[tuple[Keyframe, Feature]] = []
        for kf in self.kfs:
            for f in kf.active_features():
                self.features.append((kf, f))
        if not self.features:
            raise SingularHessian("no active features in the window")
        # anchor the monocular scale: first active feature's depth is fixed
        self.anchor = 0
        self.n_pose = 8 * len(self.free_kfs)
        self.free_depths = [i for i in range(len(self.features)) if i != self.anchor]
        self.depth_index = {fi: di for di, fi in enumerate(self.free_depths)}

    def states(self) -> list[np.ndarray]:
        """Current (pose, a, b) of every window keyframe."""
        return [(kf.pose, kf.affine) for kf in self.kfs]


def photometric_ba(local_map: LocalMap, cfg: Config) -> int:
    """LM over window keyframe states and active inverse depths, depths
    eliminated per-feature by the Schur complement (their Hessian block is
    diagonal).  The oldest keyframe's full 8-DoF state and one anchor depth
    pin the gauge.  Geometric residuals are excluded by design.  Returns the
    number of accepted iterations."""
    prob = _BAProblem(local_map, cfg)
    lam = cfg.lm_lambda_init
    accepted = 0
    energy, _ = _ba_linearize(prob, energy_only=True)
    for _ in range(cfg.ba_iterations):
        _, parts = _ba_linearize(prob, energy_only=False)
        Hpp, Hpd, Hdd, bp, bd = parts
        try:
            dp, dd = _schur_solve(Hpp, Hpd, Hdd, bp, bd, lam)
        except np.linalg.LinAlgError as exc:
            raise SingularHessian(f"reduced camera system: {exc}") from exc
        step = float(np.linalg.norm(np.concatenate([dp, dd])))
        saved = _ba_apply(prob, dp, dd)
        new_energy, _ = _ba_linearize(prob, energy_only=True)
        if new_energy < energy:
            energy = new_energy
            lam *= cfg.lm_lambda_down
            accepted += 1
            if step < cfg.ba_step_eps:
                break
        else:
            _ba_restore(prob, saved)
            lam *= cfg.lm_lambda_up
    return accepted


def _schur_solve(Hpp, Hpd, Hdd, bp, bd, lam):
    """Solve the damped normal equations by eliminating the diagonal depth
    block: (Hpp - Hpd Hdd^-1 Hdp) dp = -(bp - Hpd Hdd^-1 bd)."""
    Hpp = Hpp + lam * np.diag(np.diag(Hpp))
    Hdd = Hdd * (1.0 + lam)
    # a zero diagonal entry means no target keyframe observed that feature
    # this iteration — hold its depth fixed instead of aborting
    inv_d = np.zeros_like(Hdd)
    np.divide(1.0, Hdd, out=inv_d, where=Hdd > 0.0)
    S = Hpp - (Hpd * inv_d[None, :]) @ Hpd.T
    rhs = -(bp - Hpd @ (inv_d * bd))
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e14:
        raise np.linalg.LinAlgError("singular reduced system")
    dp = np.linalg.solve(S, rhs)
    dd = -inv_d * (bd + Hpd.T @ dp)
    return dp, dd


def _ba_apply(prob: _BAProblem, dp: np.ndarray, dd: np.ndarray):
    from .geometry import se3_exp

    saved_states = [(kf.pose, kf.affine) for kf in prob.free_kfs]
    saved_depths = [f.idepth for _, f in prob.features]
    for i, kf in enumerate(prob.free_kfs):
        d = dp[8 * i : 8 * i + 8]
        kf.pose = se3_exp(d[:6]).compose(kf.pose)
        kf.affine = AffineBrightness(
            kf.affine.a + float(d[6]), kf.affine.b + float(d[7]), kf.affine.exposure
        )
    for fi in prob.free_depths:
        _, f = prob.features[fi]
        f.idepth = max(f.idepth + float(dd[prob.depth_index[fi]]), 1e-8)
    return saved_states, saved_depths


def _ba_restore(prob: _BAProblem, saved) -> None:
    saved_states, saved_depths = saved
    for kf, (pose, affine) in zip(prob.free_kfs, saved_states):
        kf.pose = pose
        kf.affine = affine
    for (_, f), rho in zip(prob.features, saved_depths):
        f.idepth = rho


def _ba_linearize(prob: _BAProblem, energy_only: bool):
    """Evaluate the windowed photometric energy; optionally accumulate the
    (pose | depth)-partitioned normal equations."""
    cfg = prob.cfg
    n_pose = prob.n_pose
    n_dep = len(prob.free_depths)
    Hpp = np.zeros((n_pose, n_pose))
    Hpd = np.zeros((n_pose, n_dep))
    Hdd = np.zeros(n_dep)
    bp = np.zeros(n_pose)
    bd = np.zeros(n_dep)
    energy = 0.0

    # features grouped by host keyframe, preserving problem indices
    by_host: dict[int, list[int]] = {}
    for fi, (kf, _) in enumerate(prob.features):
        by_host.setdefault(kf.id, []).append(fi)
    kf_by_id = {kf.id: kf for kf in prob.kfs}

    for host_id, fis in by_host.items():
        host = kf_by_id[host_id]
        c = host.pyramid.intrinsics[0]
        feats = [prob.features[fi][1] for fi in fis]
        pts = np.array([f.p for f in feats])
        rho = np.array([f.idepth for f in feats])
        uu = pts[:, 0][:, None] + _OFF_U[None, :]
        vv = pts[:, 1][:, None] + _OFF_V[None, :]
        xn = np.ascontiguousarray((uu - c.cu) / c.fu)
        yn = np.ascontiguousarray((vv - c.cv) / c.fv)
        ref = np.array([f.patch for f in feats])
        for tgt in prob.kfs:
            if tgt.id == host_id:
                continue
            rel = tgt.pose.compose(host.pose.inverse())
            gain = tgt.affine.gain_from(host.affine)
            plane = tgt.pyramid.levels[0]
            res, gu, gv, un, vn, iz, valid = kernels.photometric_blocks(
                plane.intensities, plane.grad_u, plane.grad_v,
                c.fu, c.fv, c.cu, c.cv,
                np.ascontiguousarray(rel.rotation),
                np.ascontiguousarray(rel.translation),
                gain, host.affine.b, tgt.affine.b,
                xn, yn, np.ascontiguousarray(ref), rho,
                float(cfg.border), cfg.z_min, not energy_only,
            )
            valid = valid.astype(bool)
            if not valid.any():
                continue
            e_blocks = (res * res).sum(axis=1)
            w = np.where(valid, huber_weights(e_blocks, cfg.gamma_p), 0.0)
            energy += float((w * e_blocks)[valid].sum())
            if energy_only:
                continue
            _ba_accumulate(
                prob, fis, host, tgt, c, rel, gain,
                res, gu, gv, un, vn, iz, valid, w, xn, yn, ref,
                Hpp, Hpd, Hdd, bp, bd,
            )
    return energy, (Hpp, Hpd, Hdd, bp, bd)


def _ba_accumulate(
    prob, fis, host, tgt, c, rel, gain,
    res, gu, gv, un, vn, iz, valid, w, xn, yn, ref,
    Hpp, Hpd, Hdd, bp, bd,
):
    """Add one (host, target) pair's Jacobian products into the partitioned
    normal equations.  Row layout per pattern point: the 1x8 target-state
    block, the 1x8 host-state block, and the 1x1 depth column."""
    cfg = prob.cfg
    N, P = res.shape
    z = np.where(iz > 0, 1.0 / np.where(iz > 0, iz, 1.0), 0.0)
    x_t = np.stack([un * z, vn * z, z], axis=-1)  # target-frame points
    # image gradient chained through the projection: a = dI/dx_t, (N,P,3)
    a = np.stack(
        [
            gu * c.fu * iz,
            gv * c.fv * iz,
            -(gu * c.fu * un + gv * c.fv * vn) * iz,
        ],
        axis=-1,
    )
    # target pose columns: [a, -(a x x_t)]; host pose: [-aR, (R^T a) x x_h]
    ax = np.cross(a, x_t)
    J_t = np.concatenate([a, -ax], axis=-1)  # (N,P,6)
    aR = a @ rel.rotation  # == (R^T a^T)^T rowwise
    n_h = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    rho = np.array([prob.features[fi][1].idepth for fi in fis])
    x_h = n_h / rho[:, None, None]
    J_h = np.concatenate([-aR, np.cross(aR, x_h)], axis=-1)
    # affine columns: target gets (-gain*(I_h - b_h), -1), host the negatives
    dI = gain * (ref - host.affine.b)
    J_t_ab = np.stack([-dI, -np.ones_like(dI)], axis=-1)
    J_h_ab = np.stack([dI, np.full_like(dI, gain)], axis=-1)
    # depth column: a . (-R n_h / rho^2)
    Rn = n_h @ rel.rotation.T
    J_d = -(a * Rn).sum(axis=-1) / (rho**2)[:, None]

    wv = np.where(valid, w, 0.0)
    t_idx = prob.kf_index.get(tgt.id)
    h_idx = prob.kf_index.get(host.id)

    J_t8 = np.concatenate([J_t, J_t_ab], axis=-1)
    J_h8 = np.concatenate([J_h, J_h_ab], axis=-1)
    for idx, J8 in ((t_idx, J_t8), (h_idx, J_h8)):
        if idx is None:
            continue
        sl = slice(8 * idx, 8 * idx + 8)
        Hpp[sl, sl] += np.einsum("npi,npj,n->ij", J8, J8, wv)
        bp[sl] += np.einsum("npi,np,n->i", J8, res, wv)
    if t_idx is not None and h_idx is not None:
        st, sh = slice(8 * t_idx, 8 * t_idx + 8), slice(8 * h_idx, 8 * h_idx + 8)
        cross = np.einsum("npi,npj,n->ij", J_t8, J_h8, wv)
        Hpp[st, sh] += cross
        Hpp[sh, st] += cross.T
    for row, fi in enumerate(fis):
        di = prob.depth_index.get(fi)
        if di is None or not valid[row]:
            continue
        jd = J_d[row]
        Hdd[di] += wv[row] * float(jd @ jd)
        bd[di] += wv[row] * float(jd @ res[row])
        if t_idx is not None:
            Hpd[8 * t_idx : 8 * t_idx + 8, di] += wv[row] * (J_t8[row].T @ jd)
        if h_idx is not None:
            Hpd[8 * h_idx : 8 * h_idx + 8, di] += wv[row] * (J_h8[row].T @ jd)


def structure_only_optimization(local_map: LocalMap, cfg: Config) -> int:
    """Depth-only Gauss-Newton on marginalized corners with >= 2 recorded
    observations in live keyframes; poses fixed, Huber-weighted, 5
    iterations, update rejected if the energy rose.  Returns refined count."""
    live = {kf.id: kf for kf in local_map.hybrid_window}
    live.update({kf.id: kf for kf in local_map.indirect_set})
    refined = 0
    for kf in list(live.values()):
        for f in kf.features:
            if f.kind is not FeatureKind.CORNER:
                continue
            if f.status is not FeatureStatus.MARGINALIZED:
                continue
            obs = [
                (live[kid], uv)
                for kid, uv in f.observations.items()
                if kid in live and kid != kf.id
            ]
            if len(obs) < 2:
                continue
            if _refine_depth(f, kf, obs, cfg):
                refined += 1
    return refined


def _refine_depth(f: Feature, host: Keyframe, obs, cfg: Config) -> bool:
    c = host.pyramid.intrinsics[0]
    n = np.array([(f.p[0] - c.cu) / c.fu, (f.p[1] - c.cv) / c.fv, 1.0])
    rho0 = f.idepth

    def energy_and_grads(rho: float):
        E = 0.0
        Hs = 0.0
        bs = 0.0
        for tgt, uv in obs:
            ci = tgt.pyramid.intrinsics[0]
            rel = tgt.pose.compose(host.pose.inverse())
            Rn = rel.rotation @ n
            x = Rn / rho + rel.translation
            if x[2] <= cfg.z_min:
                continue
            u = ci.fu * x[0] / x[2] + ci.cu
            v = ci.fv * x[1] / x[2] + ci.cv
            r = np.array([u - uv[0], v - uv[1]])
            e = float(r @ r)
            wgt = huber_weight(e, cfg.gamma_g)
            E += wgt * e
            # dr/drho via dx/drho = -Rn/rho^2
            dx = -Rn / rho**2
            iz = 1.0 / x[2]
            du = ci.fu * iz * dx[0] - ci.fu * x[0] * iz * iz * dx[2]
            dv = ci.fv * iz * dx[1] - ci.fv * x[1] * iz * iz * dx[2]
            j = np.array([du, dv])
            Hs += wgt * float(j @ j)
            bs += wgt * float(j @ r)
        return E, Hs, bs

    E0, _, _ = energy_and_grads(rho0)
    rho = rho0
    for _ in range(5):
        _, Hs, bs = energy_and_grads(rho)
        if Hs <= 1e-12:
            break
        step = -bs / Hs
        rho = max(rho + step, 1e-8)
        if abs(step) < 1e-10:
            break
    E1, _, _ = energy_and_grads(rho)
    if E1 > E0:
        return False
    f.idepth = rho
    return True


def marginalize(local_map: LocalMap, cfg: Config) -> Keyframe | None:
    """Shrink the window to size W by demoting one keyframe.

    Keeps the two newest; among the rest drops the one with the highest
    closeness-redundancy score sum_j 1/(dist + eps).  Its photometric data
    leaves BA; actives become Marginalized, remaining candidates Outlier;
    the keyframe joins indirect_set only if it still shares corner
    observations with the newest keyframe.
    """
    if len(local_map.hybrid_window) <= local_map.window_size:
        return None
    window = local_map.hybrid_window
    candidates = window[:-2]
    centers = {kf.id: -(kf.pose.rotation.T @ kf.pose.translation) for kf in window}
    best, best_score = None, -math.inf
    for kf in candidates:
        score = 0.0
        for other in window:
            if other.id == kf.id:
                continue
            d = float(np.linalg.norm(centers[kf.id] - centers[other.id]))
            score += 1.0 / (d + cfg.marg_epsilon)
        if score > best_score:
            best, best_score = kf, score
    assert best is not None
    window.remove(best)
    for f in best.features:
        if f.status is FeatureStatus.ACTIVE:
            f.set_status(FeatureStatus.MARGINALIZED)
        elif f.status is FeatureStatus.CANDIDATE:
            f.set_status(FeatureStatus.OUTLIER)
    newest = local_map.newest()
    shares = any(
        newest.id in f.observations
        for f in best.features
        if f.kind is FeatureKind.CORNER and f.status is FeatureStatus.MARGINALIZED
    )
    best.demote()
    if shares:
        local_map.indirect_set.append(best)
    # prune the indirect set per the sharing invariant
    local_map.indirect_set = [
        kf
        for kf in local_map.indirect_set
        if any(
            newest.id in f.observations
            for f in kf.features
            if f.kind is FeatureKind.CORNER
            and f.status in (FeatureStatus.ACTIVE, FeatureStatus.MARGINALIZED)
        )
    ]
    return best


class Mapper:
    """Sequential mapping activity over a bounded handoff from the tracker.

    All LocalMap mutation happens under ``lock``; the tracker takes
    consistent snapshots via :meth:`tracking_reference`.
    """

    def __init__(self, cfg: Config, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.map = LocalMap(window_size=cfg.window_size)
        self.lock = threading.Lock()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._next_kf_id = 0
        self._last_sigma2_p = 1.0
        self.retired: list[Keyframe] = []  # demoted keyframes, for the map dump
        self.timings: dict[str, float] = defaultdict(float)  # stage -> seconds

    @contextlib.contextmanager
    def _stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] += time.perf_counter() - t0

    # -- snapshots -----------------------------------------------------

    def tracking_reference(self) -> TrackingReference:
        """Snapshot of the newest keyframe for the tracker.

        Photometric support: every active feature in the window, re-expressed
        in the newest keyframe when hosted elsewhere (its per-level patches
        are then resampled from the newest image by the tracker's bundles).
        Matching support: active plus marginalized corners from the window
        and the indirect set — marginalized corners keep serving geometric
        residuals with their frozen depth.
        """
        with self.lock:
            kf = self.map.newest()
            c = kf.pyramid.intrinsics[0]
            phot: list = []
            corners: list = []
            for any_kf in self.map.hybrid_window + self.map.indirect_set:
                same = any_kf.id == kf.id
                rel = None if same else kf.pose.compose(any_kf.pose.inverse())
                for f in any_kf.features:
                    if f.idepth <= 0:
                        continue
                    view = f if same else _rehost(f, rel, c, self.cfg.z_min)
                    if view is None:
                        continue
                    if f.status is FeatureStatus.ACTIVE and any_kf.kind is KeyframeKind.HYBRID:
                        phot.append(view)
                    if f.kind is FeatureKind.CORNER and f.status in (
                        FeatureStatus.ACTIVE,
                        FeatureStatus.MARGINALIZED,
                    ):
                        corners.append(view)
            return TrackingReference(
                kf_id=kf.id,
                pyramid=kf.pyramid,
                affine=kf.affine,
                phot_features=phot,
                corner_features=corners,
                pose=kf.pose,
            )

    # -- keyframe insertion ---------------------------------------------

    def insert_first_keyframe(
        self,
        pyramid: ImagePyramid,
        pose: Pose,
        affine: AffineBrightness,
        idepth_map: np.ndarray | None,
    ) -> Keyframe:
        """Bootstrap: detect corners, sample pixels, seed depths (ground
        truth when given, else a unit-depth filter prior), activate."""
        with self.lock, self._stage("New map point initialization"):
            kf = Keyframe(self._next_kf_id, pyramid, pose, affine)
            self._next_kf_id += 1
            self.map.hybrid_window.append(kf)
            c = pyramid.intrinsics[0]
            self.map.grid = OccupancyGrid(c.width, c.height, self.cfg.cell_size)
            corners = detect_corners(pyramid, self.cfg, kf.id)
            self.map.grid.clear()
            pixels = sample_pixel_candidates(
                pyramid, self.map.grid, corners, self.cfg.pixel_quota * 2, self.cfg, kf.id
            )
            feats = corners[: self.cfg.max_corners] + pixels
            self._seed_depths(feats, idepth_map)
            kf.features.extend(feats)
            update_occupancy(self.map.grid, [])
            activate_features(
                kf.features, self.map.grid,
                self.cfg.corner_quota, self.cfg.pixel_quota, self.cfg,
            )
            return kf

    def _seed_depths(self, feats: list[Feature], idepth_map: np.ndarray | None):
        for f in feats:
            if idepth_map is not None:
                rho = float(idepth_map[int(round(f.p[1])), int(round(f.p[0]))])
                if rho <= 0:
                    rho = 1.0
                f.idepth = rho
                f.idepth_variance = max(
                    (0.05 * rho) ** 2 * self.cfg.activation_var_ratio, 1e-10
                )
            else:
                f.idepth = float(self.rng.uniform(0.5, 2.0))
                f.idepth_variance = 1.0

    def insert_keyframe(
        self,
        pyramid: ImagePyramid,
        track: TrackResult,
        frame_corners: list[Feature],
        idepth_map: np.ndarray | None = None,
    ) -> Keyframe:
        """Full keyframe cycle: record observations, create the keyframe,
        refresh occupancy, activate, sample new candidates, run BA,
        structure-only refinement, and marginalize if the window overflowed."""
        with self.lock:
            # this frame constrains candidate depths like any other; filter
            # first, while track.state is still relative to the newest kf
            with self._stage("Candidate Points Depth Update"):
                update_candidate_depths(
                    self.map, pyramid, track.state, self.cfg,
                    getattr(track, "sigma2_p", 1.0),
                )
            with self._stage("Local Map Update"):
                prev_newest = self.map.newest()
                pose = track.state.pose().compose(prev_newest.pose)
                kf = Keyframe(self._next_kf_id, pyramid, pose, track.state.affine)
                self._next_kf_id += 1
                for m in track.matches:
                    base = getattr(m.feature, "base", m.feature)
                    base.observations[kf.id] = np.asarray(m.obs, dtype=np.float64)
                    base.num_observations += 1
                self.map.hybrid_window.append(kf)

            # occupancy from all projected active/candidate points, then
            # activation of converged candidates at empty grid locations,
            # then fresh candidates at the remaining empty ones
            with self._stage("Occupancy map Update"):
                self._refresh_occupancy(cull=False, mark_candidates=False)
            with self._stage("New map point initialization"):
                cands, proj = self._projected_candidates()
                activate_features(
                    cands, self.map.grid, self.cfg.corner_quota, self.cfg.pixel_quota,
                    self.cfg, proj,
                )
                # unactivated candidates keep their cells reserved so fresh
                # sampling spreads into genuinely uncovered image area
                for f, p in zip(cands, proj):
                    if f.status is FeatureStatus.CANDIDATE and self.map.grid.in_image(p):
                        self.map.grid.mark(p)
                new_corners = []
                for f in frame_corners:  # adopt this frame's detections as candidates
                    if self.map.grid.is_free(f.p):
                        f.host_keyframe = kf.id
                        self.map.grid.mark(f.p)
                        new_corners.append(f)
                pixels = sample_pixel_candidates(
                    pyramid, self.map.grid, frame_corners, self.cfg.pixel_quota,
                    self.cfg, kf.id,
                )
                self._seed_depths(new_corners + pixels, idepth_map)
                # depth prior from the map when no ground truth is given
                if idepth_map is None:
                    actives = [
                        f for k in self.map.hybrid_window for f in k.active_features()
                    ]
                    if actives:
                        med = float(np.median([f.idepth for f in actives]))
                        for f in new_corners + pixels:
                            f.idepth = med
                kf.features.extend(new_corners + pixels)

            with self._stage("Photometric BA"):
                if len(self.map.hybrid_window) >= 2:
                    try:
                        photometric_ba(self.map, self.cfg)
                    except SingularHessian:
                        pass  # degenerate window this round (near-zero
                        # baseline or starved coverage); states keep their
                        # tracked values until the next keyframe
            with self._stage("Structure only optimization"):
                structure_only_optimization(self.map, self.cfg)
            with self._stage("Local Map Update"):
                dropped = marginalize(self.map, self.cfg)
                if dropped is not None:
                    self.retired.append(dropped)
            with self._stage("Occupancy map Update"):
                self._refresh_occupancy(cull=True)
            return kf

    def _projected_candidates(self):
        newest = self.map.newest()
        c = newest.pyramid.intrinsics[0]
        cands, proj = [], []
        for kf in self.map.hybrid_window:
            rel = newest.pose.compose(kf.pose.inverse())
            for f in kf.candidates():
                p = _project_feature(f, rel, c, self.cfg.z_min)
                if p is not None:
                    cands.append(f)
                    proj.append(p)
        return cands, (np.array(proj) if proj else np.zeros((0, 2)))

    def _refresh_occupancy(self, cull: bool, mark_candidates: bool = True) -> None:
        """Re-mark the grid from all live points projected into the newest
        keyframe.  With ``cull=True``, an active feature landing inside an
        already-occupied block is demoted (corner -> Marginalized, pixel ->
        Outlier) so active blocks never overlap.  ``mark_candidates=False``
        leaves candidate cells free — used right before activation, which
        must see only the active coverage."""
        newest = self.map.newest()
        c = newest.pyramid.intrinsics[0]
        grid = self.map.grid
        if grid is None or grid.width != c.width or grid.height != c.height:
            grid = self.map.grid = OccupancyGrid(c.width, c.height, self.cfg.cell_size)
        grid.clear()
        for kf in self.map.hybrid_window:
            rel = newest.pose.compose(kf.pose.inverse())
            for f in kf.features:
                if f.status is FeatureStatus.ACTIVE:
                    p = _project_feature(f, rel, c, self.cfg.z_min)
                    if p is None or not grid.in_image(p):
                        continue
                    if cull and not grid.is_free(p):
                        if f.kind is FeatureKind.CORNER:
                            f.set_status(FeatureStatus.MARGINALIZED)
                        else:
                            f.set_status(FeatureStatus.OUTLIER)
                        continue
                    grid.mark(p)
        if not mark_candidates:
            return
        for kf in self.map.hybrid_window:
            rel = newest.pose.compose(kf.pose.inverse())
            for f in kf.candidates():
                p = _project_feature(f, rel, c, self.cfg.z_min)
                if p is not None and grid.in_image(p):
                    grid.mark(p)

    # -- non-keyframe frames ---------------------------------------------

    def process_frame(self, frame: ImagePyramid, track: TrackResult) -> None:
        with self.lock, self._stage("Candidate Points Depth Update"):
            self._last_sigma2_p = getattr(track, "sigma2_p", 1.0)
            update_candidate_depths(
                self.map, frame, track.state, self.cfg, self._last_sigma2_p
            )
