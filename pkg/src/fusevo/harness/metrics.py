"""Trajectory-error metrics: Sim(3) registration, ATE, drift, and the
plain-text trajectory format shared by the exporter, the pipeline, and
``fusevo eval``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InsufficientOverlap

__all__ = [
    "TrajectoryReport",
    "compute_alignment_error",
    "match_timestamps",
    "quaternion_to_rotation",
    "read_trajectory",
    "rotation_to_quaternion",
    "umeyama_sim3",
    "write_trajectory",
]


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) of a rotation matrix, qw >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q /= np.linalg.norm(q)
    return q if q[3] >= 0.0 else -q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (qx, qy, qz, qw) quaternion."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class TrajectoryReport:
    """Per-frame estimated camera-to-world poses plus error metrics.

    Metrics are NaN until :func:`compute_alignment_error` fills them;
    they are always computed after Sim(3) registration to ground truth
    (the monocular scale gauge).  ``alignment_error`` is the mean
    post-alignment position error, ``ate_rmse`` the root-mean-square one.
    """

    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quaternions: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    alignment_error: float = math.nan
    ate_rmse: float = math.nan
    drift_per_meter: float = math.nan
    tracking_lost_at: int | None = None
    num_keyframes: int = 0
    stage_seconds: dict = field(default_factory=dict)  # wall time per pipeline stage

    @property
    def num_frames(self) -> int:
        return len(self.timestamps)


def write_trajectory(
    path: str | Path,
    timestamps: np.ndarray,
    positions: np.ndarray,
    quaternions: np.ndarray,
) -> None:
    """One pose per line: ``timestamp tx ty tz qx qy qz qw``."""
    with open(path, "w") as fh:
        for t, p, q in zip(timestamps, positions, quaternions):
            fh.write(
                f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_trajectory(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            rows.append([float(x) for x in parts])
    arr = np.array(rows, dtype=float).reshape(-1, 8)
    return arr[:, 0], arr[:, 1:4], arr[:, 4:8]


def umeyama_sim3(
    src: np.ndarray, dst: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form similarity (s, R, t) minimizing ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X, Y = src - mu_s, dst - mu_d
    C = Y.T @ X / n
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = float((X * X).sum()) / n
    s = float((D * np.diag(S)).sum()) / var if var > 0.0 else 1.0
    t = mu_d - s * (R @ mu_s)
    return s, R, t


def match_timestamps(
    t_est: np.ndarray, t_gt: np.ndarray, tol: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Indices (into est, into gt) of nearest-timestamp pairs within ``tol``.

    Default tolerance is a quarter of the ground-truth frame interval, so
    exact synthetic timestamps pair one-to-one.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    if tol is None:
        if len(t_gt) > 1:
            tol = 0.25 * float(np.median(np.diff(np.sort(t_gt))))
        else:
            tol = 1e-6
        tol = max(tol, 1e-9)
    order = np.argsort(t_gt)
    sorted_gt = t_gt[order]
    pos = np.searchsorted(sorted_gt, t_est)
    ia, ib = [], []
    used: set[int] = set()
    for i, p in enumerate(pos):
        best, best_d = -1, math.inf
        for cand in (p - 1, p):
            if 0 <= cand < len(sorted_gt):
                d = abs(t_est[i] - sorted_gt[cand])
                if d < best_d:
                    best, best_d = cand, d
        if best >= 0 and best_d <= tol and best not in used:
            used.add(best)
            ia.append(i)
            ib.append(int(order[best]))
    return np.array(ia, dtype=int), np.array(ib, dtype=int)


def _as_trajectory(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, TrajectoryReport):
        return np.asarray(x.timestamps, float), np.asarray(x.positions, float)
    t, p = x[0], x[1]
    return np.asarray(t, float), np.asarray(p, float).reshape(-1, 3)


def compute_alignment_error(est, gt, tol: float | None = None) -> TrajectoryReport:
    """Sim(3)-registered trajectory errors of ``est`` against ``gt``.

    Both arguments are either a :class:`TrajectoryReport` or a
    ``(timestamps, positions)`` pair.  Raises :class:`InsufficientOverlap`
    below 3 matched timestamps.  The returned report carries the estimate's
    per-frame data with ``alignment_error`` (mean), ``ate_rmse``, and
    ``drift_per_meter`` filled in; drift registers on the leading 20% of
    matches and reads off the terminal error per ground-truth path length.
    """
    t_e, p_e = _as_trajectory(est)
    t_g, p_g = _as_trajectory(gt)
    ia, ib = match_timestamps(t_e, t_g, tol)
    if len(ia) < 3:
        raise InsufficientOverlap(
            f"{len(ia)} matched timestamps between trajectories; need >= 3"
        )
    A, B = p_e[ia], p_g[ib]
    s, R, t = umeyama_sim3(A, B)
    err = np.linalg.norm(s * A @ R.T + t - B, axis=1)
    ate = float(np.sqrt(np.mean(err**2)))
    mean_err = float(np.mean(err))

    head = max(3, int(math.ceil(0.2 * len(ia))))
    s2, R2, t2 = umeyama_sim3(A[:head], B[:head])
    end_err = float(np.linalg.norm(s2 * R2 @ A[-1] + t2 - B[-1]))
    path = float(np.sum(np.linalg.norm(np.diff(B, axis=0), axis=1)))
    drift = end_err / max(path, 1e-12)

    out = TrajectoryReport(
        timestamps=t_e,
        positions=p_e,
        quaternions=(
            est.quaternions if isinstance(est, TrajectoryReport) else np.zeros((len(t_e), 4))
        ),
        alignment_error=mean_err,
        ate_rmse=ate,
        drift_per_meter=drift,
        tracking_lost_at=(
            est.tracking_lost_at if isinstance(est, TrajectoryReport) else None
        ),
    )
    return out
