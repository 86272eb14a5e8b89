"""Coarse-to-fine joint tracking: one Levenberg-Marquardt minimization of the
scalarized two-family energy, steered by the logistic utility weight K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import Config
from .errors import SingularHessian, TrackingLost
from .features import PATTERN_SIZE, Feature, FeatureStatus, Match, match_corners
from .geometry import AffineBrightness, FrameState, Pose, oplus, se3_log
from .pyramid import ImagePyramid
from .residuals import (
    GeometricBundle,
    PhotometricBundle,
    ResidualSystem,
    estimate_variances,
    level_coords,
)

__all__ = [
    "TrackingReference",
    "LevelTrace",
    "TrackResult",
    "utility_K",
    "joint_step",
    "track_frame",
    "constant_velocity_prior",
]


def utility_K(
    l: int,
    N_g: int,
    scale: float = 5.0,
    level_decay: float = 2.0,
    midpoint: float = 30.0,
    width: float = 4.0,
) -> float:
    """Logistic schedule for the geometric weight.

    Decays exponentially with pyramid level (coarse levels trust photometric
    terms) and saturates logistically with the inlier match count, supremum
    ``scale``; at (0, midpoint) it is exactly scale/2.
    """
    return scale * math.exp(-level_decay * l) / (1.0 + math.exp((midpoint - N_g) / width))


@dataclass
class TrackingReference:
    """Immutable snapshot of a keyframe the tracker aligns against.

    ``phot_features`` contribute photometric blocks; ``corner_features`` are
    matchable corners (active ones plus marginalized corners whose frozen
    depth still serves geometric residuals).
    """

    kf_id: int
    pyramid: ImagePyramid
    affine: AffineBrightness
    phot_features: list[Feature]
    corner_features: list[Feature]
    pose: Pose = field(default_factory=Pose.identity)  # keyframe world pose


@dataclass
class LevelTrace:
    level: int
    n_p: int
    n_g: int
    K: float
    energies: list[float] = field(default_factory=list)


@dataclass
class TrackResult:
    state: FrameState
    inlier_counts: list[tuple[int, int]]  # (n_p, n_g) per processed level, coarse->fine
    final_energy: float
    K_trace: list[float]
    converged: bool
    matches: list[Match] = field(default_factory=list)
    levels: list[LevelTrace] = field(default_factory=list)
    phot_outliers: list[Feature] = field(default_factory=list)
    sigma2_p: float = 1.0  # finest-level photometric scale (depth-filter gate)


def joint_step(sys: ResidualSystem, K: float, lam: float) -> np.ndarray:
    """One damped step of the scalarized normal equations.

    delta = -[(J'WJ/n s2)_p + K (J'WJ/n s2)_g + lam diag]^-1
             [(J'Wr/n s2)_p + K (J'Wr/n s2)_g].
    Duplicating all blocks of either family leaves the step unchanged: the
    per-family normalization divides the sums by the same count they scale
    with.
    """
    H = np.zeros((8, 8))
    b = np.zeros(8)
    have_any = False
    if sys.phot is not None and sys.phot.J is not None and sys.n_p > 0:
        Jw = sys.phot.J * sys.phot.w[:, None, None]
        scale = 1.0 / (sys.n_p * sys.sigma2_p)
        H += np.einsum("npi,npj->ij", Jw, sys.phot.J) * scale
        b += np.einsum("npi,np->i", Jw, sys.phot.r) * scale
        have_any = True
    if sys.geo is not None and sys.n_g > 0 and K != 0.0:
        Jw = sys.geo.J * sys.geo.w[:, None, None]
        scale = K / (sys.n_g * sys.sigma2_g)
        H += np.einsum("nri,nrj->ij", Jw, sys.geo.J) * scale
        b += np.einsum("nri,nr->i", Jw, sys.geo.r) * scale
        have_any = True
    if not have_any:
        raise SingularHessian("no valid residual blocks to form a step")
    Hd = H + lam * np.diag(np.diag(H))
    if not np.all(np.isfinite(Hd)) or np.linalg.cond(Hd) > 1e14:
        raise SingularHessian("damped normal equations are numerically singular")
    try:
        delta = np.linalg.solve(Hd, -b)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian(str(exc)) from exc
    if not np.all(np.isfinite(delta)):
        raise SingularHessian("non-finite step")
    return delta


def _outlier_pass(
    phot_res,
    geo_res,
    sys: ResidualSystem,
    factor: float,
    pattern_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-block energy gates: a block whose summed energy exceeds
    factor^2 * sigma^2 * (rows in the block) is an outlier."""
    f2 = factor * factor
    phot_bad = np.zeros(0, dtype=bool)
    geo_bad = np.zeros(0, dtype=bool)
    if phot_res is not None:
        phot_bad = phot_res.valid & (
            phot_res.energies > f2 * sys.sigma2_p * pattern_size
        )
    if geo_res is not None:
        geo_bad = geo_res.valid & (geo_res.energies > f2 * sys.sigma2_g * 2.0)
    return phot_bad, geo_bad


def track_frame(
    ref: TrackingReference,
    frame: ImagePyramid,
    corners: list[Feature],
    prior: FrameState,
    cfg: Config,
    force_K: float | None = None,
    use_geometric: bool = True,
    matches: list[Match] | None = None,
) -> TrackResult:
    """Align ``frame`` against the reference keyframe, coarse to fine.

    Corners are matched once at level 0; their observations are rescaled at
    coarser levels.  Per level: K comes from the current inlier count (or
    ``force_K``), variances are re-estimated, LM runs with energy-decrease
    acceptance, and an outlier pass prunes both families before the next
    level.  At the finest level, outlier blocks mark their features Outlier
    where the status machine allows it.

    ``matches`` may be precomputed (the CLI times matching as its own
    pipeline stage); when None they are found here.
    """
    intr0 = ref.pyramid.intrinsics[0]
    if matches is None:
        matches = []
        if use_geometric and corners and ref.corner_features:
            matches = match_corners(
                ref.corner_features, corners, prior, cfg.search_window, intr0, cfg
            )
    elif not use_geometric:
        matches = []

    phot_feats = [f for f in ref.phot_features if f.idepth > 0.0]
    phot_alive = np.ones(len(phot_feats), dtype=bool)
    geo_alive = np.ones(len(matches), dtype=bool)
    p0 = (
        np.array([f.p for f in phot_feats])
        if phot_feats
        else np.zeros((0, 2))
    )
    rho0 = np.array([f.idepth for f in phot_feats]) if phot_feats else np.zeros(0)

    state = prior
    levels: list[LevelTrace] = []
    K_trace: list[float] = []
    inlier_counts: list[tuple[int, int]] = []
    converged = False
    final_energy = 0.0
    final_sigma2_p = 1.0
    phot_struck = np.zeros(len(phot_feats), dtype=bool)  # pruned at any level
    finest_phot_ok = np.zeros(len(phot_feats), dtype=bool)

    for level in range(cfg.num_levels - 1, -1, -1):
        c = ref.pyramid.intrinsics[level]
        host_plane = ref.pyramid.levels[level]
        target_plane = frame.levels[level]

        pa = np.nonzero(phot_alive)[0]
        bundle = None
        if len(pa):
            bundle = PhotometricBundle(
                host_plane,
                c,
                level_coords(p0[pa], level),
                rho0[pa],
                border=float(cfg.border),
            )
        ga = np.nonzero(geo_alive)[0]
        geo_bundle = None
        if use_geometric and len(ga):
            geo_bundle = GeometricBundle(
                intr0,
                np.array([matches[i].feature.p for i in ga]),
                np.array([matches[i].feature.idepth for i in ga]),
                np.array([matches[i].obs for i in ga]),
                np.array([matches[i].feature.idepth_variance for i in ga]),
                level=level,
            )

        def evaluate(st: FrameState, with_grads: bool) -> ResidualSystem:
            phot = (
                bundle.evaluate(
                    target_plane, st, ref.affine, cfg.gamma_p, cfg.z_min, with_grads
                )
                if bundle is not None
                else None
            )
            geo = (
                geo_bundle.evaluate(st, cfg.gamma_g, cfg.z_min)
                if geo_bundle is not None
                else None
            )
            return ResidualSystem(phot, geo)

        sys = evaluate(state, True)
        if (sys.phot is None or not sys.phot.valid.any()) and (
            sys.geo is None or not sys.geo.valid.any()
        ):
            if level == 0:
                raise TrackingLost("no valid residual blocks at the finest level")
            continue  # nothing visible at this level; try finer
        estimate_variances(sys, cfg.variance_floor)
        n_g_level = sys.n_g
        K = force_K if force_K is not None else utility_K(
            level,
            n_g_level,
            cfg.utility_scale,
            cfg.utility_level_decay,
            cfg.utility_midpoint,
            cfg.utility_width,
        )
        K_trace.append(K)
        trace = LevelTrace(level, sys.n_p, sys.n_g, K)

        lam = cfg.lm_lambda_init
        energy = sys.energy(K)
        trace.energies.append(energy)
        level_converged = False
        entry_valid = sys.n_p
        for _ in range(cfg.max_iterations_per_level):
            try:
                delta = joint_step(sys, K, lam)
            except SingularHessian:
                break
            new_state = oplus(delta, state)
            new_sys = evaluate(new_state, False)
            # keep the level-entry normalization so energies are comparable
            new_sys.n_p, new_sys.n_g = sys.n_p, sys.n_g
            new_sys.sigma2_p, new_sys.sigma2_g = sys.sigma2_p, sys.sigma2_g
            new_energy = new_sys.energy(K)
            dropped = (
                sys.n_p > 0
                and new_sys.phot is not None
                and new_sys.phot.n_valid < 0.5 * entry_valid
            )
            if new_energy < energy and not dropped:
                state = new_state
                sys = new_sys  # relinearize: the next solve uses the accepted state
                lam *= cfg.lm_lambda_down
                energy = new_energy
                trace.energies.append(energy)
                if float(np.linalg.norm(delta)) < cfg.convergence_eps:
                    level_converged = True
                    break
            else:
                lam *= cfg.lm_lambda_up
                # a rejected step this small cannot grow again under more
                # damping: we are at the level's minimum (e.g. zero residuals)
                if float(np.linalg.norm(delta)) < cfg.convergence_eps:
                    level_converged = True
                    break
        # re-evaluate at the accepted state, prune outliers for the next level
        sys = evaluate(state, False)
        sys.n_p = sys.phot.n_valid if sys.phot is not None else 0
        sys.n_g = sys.geo.n_valid if sys.geo is not None else 0
        sys.sigma2_p, sys.sigma2_g = (
            estimate_variances(sys, cfg.variance_floor)
            if (sys.n_p or sys.n_g)
            else (sys.sigma2_p, sys.sigma2_g)
        )
        phot_bad, geo_bad = _outlier_pass(
            sys.phot, sys.geo, sys, cfg.outlier_energy_factor, PATTERN_SIZE
        )
        if sys.phot is not None:
            phot_alive[pa[phot_bad]] = False
            phot_struck[pa[phot_bad]] = True
        if sys.geo is not None:
            geo_alive[ga[geo_bad]] = False
        inlier_counts.append((sys.n_p, sys.n_g))
        trace.n_p, trace.n_g = sys.n_p, sys.n_g
        levels.append(trace)
        final_energy = energy
        if level == 0:
            converged = level_converged
            final_sigma2_p = sys.sigma2_p
            if sys.phot is not None:
                finest_phot_ok[pa[sys.phot.valid & ~phot_bad]] = True
            if sys.n_p < cfg.min_track_points and sys.n_g < 10:
                raise TrackingLost(
                    f"{sys.n_p} photometric blocks and {sys.n_g} matches "
                    "at the finest level"
                )

    surviving = [m for i, m in enumerate(matches) if geo_alive[i]]
    outliers: list[Feature] = []
    # transient failures (occlusion boundaries, interpolation at edges) are
    # strikes, not death sentences: only a run of them retires the feature
    for i, f in enumerate(phot_feats):
        if phot_struck[i]:
            f.phot_failures += 1
            if f.phot_failures >= cfg.match_failure_limit and f.status in (
                FeatureStatus.ACTIVE,
                FeatureStatus.CANDIDATE,
            ):
                f.set_status(FeatureStatus.OUTLIER)
                outliers.append(f)
        elif finest_phot_ok[i]:
            f.phot_failures = 0
    for i, m in enumerate(matches):
        if not geo_alive[i]:
            m.feature.match_failures += 1
        else:
            m.feature.match_failures = 0
    for m in matches:
        if (
            m.feature.match_failures >= cfg.match_failure_limit
            and m.feature.status in (FeatureStatus.ACTIVE, FeatureStatus.CANDIDATE)
        ):
            m.feature.set_status(FeatureStatus.OUTLIER)

    return TrackResult(
        state=state,
        inlier_counts=inlier_counts,
        final_energy=final_energy,
        K_trace=K_trace,
        converged=converged,
        matches=surviving,
        levels=levels,
        phot_outliers=outliers,
        sigma2_p=final_sigma2_p,
    )


def constant_velocity_prior(
    world_poses: Sequence[Pose],
    ref_pose: Pose,
    last_affine: AffineBrightness | None,
    exposure: float,
) -> FrameState:
    """Motion-model prior: replay the last relative motion, re-expressed
    relative to the reference keyframe; affine prior carries over (a, b)."""
    a, b = (last_affine.a, last_affine.b) if last_affine is not None else (0.0, 0.0)
    affine = AffineBrightness(a, b, exposure)
    if len(world_poses) < 2:
        return FrameState(np.zeros(6), affine)
    last, prev = world_poses[-1], world_poses[-2]
    velocity = last.compose(prev.inverse())
    predicted = velocity.compose(last)
    rel = predicted.compose(ref_pose.inverse())
    return FrameState(se3_log(rel), affine)
