"""Feature lifecycle: corner detection, pixel sampling, binary descriptors,
guided matching, and the occupancy-grid activation policy."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import Config
from .errors import OutOfImage
from .geometry import CameraIntrinsics, FrameState
from .pyramid import ImagePlane, ImagePyramid

__all__ = [
    "PATTERN_OFFSETS",
    "FeatureKind",
    "FeatureStatus",
    "Feature",
    "Match",
    "OccupancyGrid",
    "detect_corners",
    "shi_tomasi_score",
    "compute_descriptor",
    "hamming_distance",
    "match_corners",
    "sample_pixel_candidates",
    "activate_features",
    "update_occupancy",
]

# Residual pattern: center plus 7 offsets inside a 4-px radius.  Shared by
# photometric residuals, the depth filter's patch score, and Feature.patch.
PATTERN_OFFSETS = np.array(
    [(0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1)],
    dtype=np.float64,
)
PATTERN_SIZE = len(PATTERN_OFFSETS)

# Geometry of the descriptor: binary tests within this radius, sampled on a
# 5x5 box-smoothed patch, so a corner needs this much clearance from borders.
DESC_RADIUS = 13
_DESC_SMOOTH = 2  # box half-width
_DESC_HALF = DESC_RADIUS + 1 + _DESC_SMOOTH + 1  # sampling + bilinear + box
DESC_MARGIN = _DESC_HALF + 1

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


class FeatureKind(enum.Enum):
    CORNER = "corner"
    PIXEL = "pixel"


class FeatureStatus(enum.Enum):
    CANDIDATE = "candidate"
    ACTIVE = "active"
    MARGINALIZED = "marginalized"
    OUTLIER = "outlier"


_LEGAL_TRANSITIONS = {
    (FeatureStatus.CANDIDATE, FeatureStatus.ACTIVE),
    (FeatureStatus.CANDIDATE, FeatureStatus.OUTLIER),
    (FeatureStatus.ACTIVE, FeatureStatus.MARGINALIZED),
    (FeatureStatus.ACTIVE, FeatureStatus.OUTLIER),
}


@dataclass
class Feature:
    """One map point hosted in a keyframe.

    ``p`` is the level-0 pixel in the host keyframe; ``patch`` the host
    intensities over PATTERN_OFFSETS; inverse depth and its variance live
    here for both kinds (corners and pixels share the parametrization).
    Corners additionally carry a Shi-Tomasi ``score``, a 256-bit packed
    ``descriptor``, and match bookkeeping.
    """

    kind: FeatureKind
    host_keyframe: int
    p: np.ndarray
    idepth: float = 1.0
    idepth_variance: float = 1.0
    patch: np.ndarray | None = None
    score: float | None = None
    descriptor: np.ndarray | None = None
    status: FeatureStatus = FeatureStatus.CANDIDATE
    match_failures: int = 0
    phot_failures: int = 0  # consecutive photometric-block outlier verdicts
    num_observations: int = 0
    observations: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind is FeatureKind.PIXEL and (
            self.score is not None or self.descriptor is not None
        ):
            raise ValueError("pixel features carry no score or descriptor")

    def set_status(self, new: FeatureStatus) -> None:
        if new is self.status:
            return
        if (self.status, new) not in _LEGAL_TRANSITIONS:
            raise ValueError(
                f"illegal status transition {self.status.value} -> {new.value}"
            )
        self.status = new


@dataclass
class Match:
    """A descriptor match: map feature plus its observed level-0 pixel."""

    feature: Feature
    obs: np.ndarray
    hamming: int


class OccupancyGrid:
    """Coarse boolean grid over the newest keyframe; a point claims the 3x3
    cell block around its own cell."""

    def __init__(self, width: int, height: int, cell_size: int = 10):
        self.cell_size = int(cell_size)
        self.width = int(width)
        self.height = int(height)
        self.cols = math.ceil(width / cell_size)
        self.rows = math.ceil(height / cell_size)
        self.cells = np.zeros((self.rows, self.cols), dtype=bool)

    def clear(self) -> None:
        self.cells[:] = False

    def cell_of(self, p) -> tuple[int, int]:
        return int(p[1]) // self.cell_size, int(p[0]) // self.cell_size

    def in_image(self, p) -> bool:
        return 0 <= p[0] < self.width and 0 <= p[1] < self.height

    def is_free(self, p) -> bool:
        r, c = self.cell_of(p)
        return not bool(self.cells[r, c])

    def mark(self, p) -> None:
        """Occupy the 3x3 block centered on the point's cell."""
        r, c = self.cell_of(p)
        self.cells[
            max(0, r - 1) : min(self.rows, r + 2),
            max(0, c - 1) : min(self.cols, c + 2),
        ] = True


def shi_tomasi_score(plane: ImagePlane, p) -> float:
    """Min eigenvalue of the gradient structure tensor over a 7x7 window."""
    u, v = int(round(p[0])), int(round(p[1]))
    if not (3 <= u < plane.width - 3 and 3 <= v < plane.height - 3):
        raise OutOfImage(f"7x7 window at ({u}, {v}) leaves the image")
    gu = plane.grad_u[v - 3 : v + 4, u - 3 : u + 4]
    gv = plane.grad_v[v - 3 : v + 4, u - 3 : u + 4]
    a = float((gu * gu).sum())
    b = float((gu * gv).sum())
    c = float((gv * gv).sum())
    return 0.5 * (a + c) - math.sqrt(0.25 * (a - c) ** 2 + b * b)


def _scores_at(plane: ImagePlane, pts: np.ndarray) -> np.ndarray:
    """Vectorized Shi-Tomasi scores for integer corner locations."""
    us, vs = pts[:, 0], pts[:, 1]
    off = np.arange(-3, 4)
    rows = vs[:, None, None] + off[None, :, None]
    cols = us[:, None, None] + off[None, None, :]
    gu = plane.grad_u[rows, cols]
    gv = plane.grad_v[rows, cols]
    a = (gu * gu).sum(axis=(1, 2))
    b = (gu * gv).sum(axis=(1, 2))
    c = (gv * gv).sum(axis=(1, 2))
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def _nms(pts: np.ndarray, scores: np.ndarray, radius: int, shape) -> np.ndarray:
    """Greedy suppression by descending score; Chebyshev radius in pixels.

    Returns indices of survivors in descending-score order.
    """
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(shape, dtype=bool)
    keep = []
    h, w = shape
    for i in order:
        u, v = int(pts[i, 0]), int(pts[i, 1])
        if taken[v, u]:
            continue
        keep.append(i)
        taken[
            max(0, v - radius) : min(h, v + radius + 1),
            max(0, u - radius) : min(w, u + radius + 1),
        ] = True
    return np.array(keep, dtype=np.int64)


def detect_corners(
    pyr: ImagePyramid, cfg: Config, host_keyframe: int = -1
) -> list[Feature]:
    """FAST-9 corners at level 0, Shi-Tomasi scored, NMS'd, descriptor'd.

    Detection keeps DESC_MARGIN clearance so every returned corner supports
    descriptor extraction.  Sorted by descending score, capped at
    cfg.max_corners.
    """
    plane = pyr.levels[0]
    raw = kernels.fast_corners(plane.intensities, cfg.fast_threshold, DESC_MARGIN)
    if len(raw) == 0:
        return []
    scores = _scores_at(plane, raw.astype(np.int64))
    strong = scores >= cfg.min_shi_tomasi
    raw, scores = raw[strong], scores[strong]
    if len(raw) == 0:
        return []
    keep = _nms(raw, scores, 3, plane.intensities.shape)[: cfg.max_corners]
    feats = []
    for i in keep:
        p = raw[i].astype(np.float64)
        feats.append(
            Feature(
                kind=FeatureKind.CORNER,
                host_keyframe=host_keyframe,
                p=p,
                patch=_pattern_patch(plane, p),
                score=float(scores[i]),
                descriptor=compute_descriptor(plane, p),
            )
        )
    return feats


def _pattern_patch(plane: ImagePlane, p: np.ndarray) -> np.ndarray:
    vals, ok = kernels.sample_patches(
        plane.intensities,
        np.array([p[0]]),
        np.array([p[1]]),
        np.ascontiguousarray(PATTERN_OFFSETS[:, 0]),
        np.ascontiguousarray(PATTERN_OFFSETS[:, 1]),
    )
    if not ok[0]:
        raise OutOfImage(f"pattern around ({p[0]:.1f}, {p[1]:.1f}) leaves the image")
    return vals[0]


def _descriptor_tests(seed: int = 0x5EED) -> tuple[np.ndarray, np.ndarray]:
    """Fixed table of 256 (s, t) offset pairs inside DESC_RADIUS."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < 512:
        cand = rng.integers(-DESC_RADIUS, DESC_RADIUS + 1, size=(1024, 2))
        good = cand[(cand * cand).sum(axis=1) <= DESC_RADIUS * DESC_RADIUS]
        pts.extend(map(tuple, good))
    table = np.array(pts[:512], dtype=np.float64)
    return table[:256], table[256:]


_TEST_S, _TEST_T = _descriptor_tests()
# circular support for the orientation centroid
_CENT_DX, _CENT_DY = np.meshgrid(
    np.arange(-DESC_RADIUS, DESC_RADIUS + 1), np.arange(-DESC_RADIUS, DESC_RADIUS + 1)
)
_CENT_MASK = (_CENT_DX**2 + _CENT_DY**2) <= DESC_RADIUS**2


def _smoothed_window(plane: ImagePlane, p: np.ndarray) -> np.ndarray:
    """5x5 box-smoothed square window of half-width _DESC_HALF - 2 around p."""
    u, v = int(round(p[0])), int(round(p[1]))
    hw = _DESC_HALF
    if not (hw <= u < plane.width - hw and hw <= v < plane.height - hw):
        raise OutOfImage(f"descriptor window at ({u}, {v}) leaves the image")
    raw = plane.intensities[v - hw : v + hw + 1, u - hw : u + hw + 1]
    c = np.zeros((raw.shape[0] + 1, raw.shape[1] + 1))
    c[1:, 1:] = raw.cumsum(axis=0).cumsum(axis=1)
    k = 2 * _DESC_SMOOTH + 1
    return (c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]) / (k * k)


def compute_descriptor(plane: ImagePlane, p) -> np.ndarray:
    """256 smoothed-intensity comparisons, orientation-compensated by the
    intensity-centroid angle; packed to 32 bytes."""
    p = np.asarray(p, dtype=np.float64)
    sm = _smoothed_window(plane, p)  # center at index hw - 2
    c = _DESC_HALF - _DESC_SMOOTH
    disc = sm[
        c - DESC_RADIUS : c + DESC_RADIUS + 1, c - DESC_RADIUS : c + DESC_RADIUS + 1
    ]
    m10 = float((_CENT_DX * disc)[_CENT_MASK].sum())
    m01 = float((_CENT_DY * disc)[_CENT_MASK].sum())
    theta = math.atan2(m01, m10)
    ct, st = math.cos(theta), math.sin(theta)
    rot = np.array([[ct, -st], [st, ct]])
    su = _TEST_S @ rot.T
    tu = _TEST_T @ rot.T
    a = _bilinear_grid(sm, c + su[:, 0], c + su[:, 1])
    b = _bilinear_grid(sm, c + tu[:, 0], c + tu[:, 1])
    return np.packbits((a < b).astype(np.uint8))


def _bilinear_grid(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu, fv = u - u0, v - v0
    return (1 - fv) * (
        (1 - fu) * plane[v0, u0] + fu * plane[v0, u0 + 1]
    ) + fv * ((1 - fu) * plane[v0 + 1, u0] + fu * plane[v0 + 1, u0 + 1])


def hamming_distance(d1: np.ndarray, d2: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(d1, d2)].sum())


def match_corners(
    map_features: list[Feature],
    frame_corners: list[Feature],
    prior: FrameState,
    window: float,
    intr: CameraIntrinsics,
    cfg: Config,
) -> list[Match]:
    """Guided Hamming matching inside a motion-model search window.

    Each map corner is warped by ``prior``; frame corners within ``window``
    pixels compete by descriptor distance under the ratio test.  One-to-one:
    a frame corner keeps only its lowest-distance claimant.  Map corners
    left unmatched get ``match_failures`` incremented.
    """
    if not map_features or not frame_corners or window <= 0:
        for f in map_features:
            f.match_failures += 1
        return []
    pose = prior.pose()
    xn = np.array([(f.p[0] - intr.cu) / intr.fu for f in map_features])
    yn = np.array([(f.p[1] - intr.cv) / intr.fv for f in map_features])
    rho = np.array([f.idepth for f in map_features])
    pu, pv, _, _, _, ok = kernels.warp_points(
        intr.fu, intr.fv, intr.cu, intr.cv,
        np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation),
        xn, yn, rho, cfg.z_min,
    )
    cpix = np.array([c.p for c in frame_corners])
    cdesc = np.stack([c.descriptor for c in frame_corners])
    claims: dict[int, tuple[int, int]] = {}  # frame idx -> (distance, map idx)
    matched: set[int] = set()
    for i, f in enumerate(map_features):
        if not ok[i]:
            continue
        du = np.abs(cpix[:, 0] - pu[i])
        dv = np.abs(cpix[:, 1] - pv[i])
        near = np.nonzero((du <= window) & (dv <= window))[0]
        if len(near) == 0:
            continue
        dists = _POPCOUNT[np.bitwise_xor(cdesc[near], f.descriptor)].sum(axis=1)
        order = np.argsort(dists, kind="stable")
        best = int(dists[order[0]])
        second = int(dists[order[1]]) if len(order) > 1 else 1 << 30
        if best > cfg.match_threshold or best > cfg.ratio_test * second:
            continue
        j = int(near[order[0]])
        if j not in claims or best < claims[j][0]:
            claims[j] = (best, i)
    out = []
    for j, (dist, i) in sorted(claims.items()):
        out.append(Match(map_features[i], cpix[j].copy(), dist))
        matched.add(i)
    for i, f in enumerate(map_features):
        if i not in matched:
            f.match_failures += 1
    return out


def sample_pixel_candidates(
    pyr: ImagePyramid,
    grid: OccupancyGrid,
    corners: list[Feature],
    budget: int,
    cfg: Config,
    host_keyframe: int = -1,
) -> list[Feature]:
    """Pixel candidates at high-gradient non-corner, unoccupied locations.

    Threshold is region-adaptive: per 32x32 block, median gradient magnitude
    times g_th, floored at 7 intensity/px.  Each pick occupies its 3x3 grid
    block before the next is considered (descending magnitude order).
    """
    plane = pyr.levels[0]
    mag = np.hypot(plane.grad_u, plane.grad_v)
    h, w = mag.shape
    thresh = np.empty_like(mag)
    for r0 in range(0, h, 32):
        for c0 in range(0, w, 32):
            block = mag[r0 : r0 + 32, c0 : c0 + 32]
            thresh[r0 : r0 + 32, c0 : c0 + 32] = max(
                float(np.median(block)) * cfg.g_th, 7.0
            )
    margin = cfg.border + 2  # pattern radius inside the bordered image
    eligible = mag > thresh
    eligible[:margin] = eligible[-margin:] = False
    eligible[:, :margin] = eligible[:, -margin:] = False
    for f in corners:
        u, v = int(f.p[0]), int(f.p[1])
        eligible[max(0, v - 3) : v + 4, max(0, u - 3) : u + 4] = False
    vs, us = np.nonzero(eligible)
    if len(vs) == 0:
        return []
    order = np.argsort(-mag[vs, us], kind="stable")
    out: list[Feature] = []
    for i in order:
        if len(out) >= budget:
            break
        p = np.array([float(us[i]), float(vs[i])])
        if not grid.is_free(p):
            continue
        grid.mark(p)
        out.append(
            Feature(
                kind=FeatureKind.PIXEL,
                host_keyframe=host_keyframe,
                p=p,
                patch=_pattern_patch(plane, p),
            )
        )
    return out


def activate_features(
    candidates: list[Feature],
    grid: OccupancyGrid,
    corner_quota: int,
    pixel_quota: int,
    cfg: Config,
    projections: np.ndarray | None = None,
) -> list[Feature]:
    """Two-stage activation: corners by descending score into free cells,
    then pixel features greedily maximizing distance to occupied cells.

    Only candidates whose depth converged (variance below
    activation_var_ratio x idepth^2) are eligible.  ``projections`` gives
    each candidate's position in the grid's (newest-keyframe) image; when
    omitted, host pixels are used (valid while the host is newest).
    """
    if projections is None:
        projections = np.array([f.p for f in candidates]).reshape(-1, 2)
    ready = [
        (f, projections[i])
        for i, f in enumerate(candidates)
        if f.status is FeatureStatus.CANDIDATE
        and f.idepth_variance < cfg.activation_var_ratio * f.idepth**2
    ]
    activated: list[Feature] = []
    corners = sorted(
        (fp for fp in ready if fp[0].kind is FeatureKind.CORNER),
        key=lambda fp: -fp[0].score,
    )
    taken = 0
    for f, p in corners:
        if taken >= corner_quota:
            break
        if not grid.in_image(p) or not grid.is_free(p):
            continue
        grid.mark(p)
        f.set_status(FeatureStatus.ACTIVE)
        activated.append(f)
        taken += 1

    pixels = [fp for fp in ready if fp[0].kind is FeatureKind.PIXEL and grid.in_image(fp[1])]
    taken = 0
    while pixels and taken < pixel_quota:
        dist = _free_distance(grid)
        best_i, best_d = -1, -1.0
        for i, (f, p) in enumerate(pixels):
            r, c = grid.cell_of(p)
            d = dist[r, c]
            if d > best_d:
                best_i, best_d = i, d
        f, p = pixels.pop(best_i)
        if best_d <= 0.0:  # everything left sits on occupied cells
            break
        grid.mark(p)
        f.set_status(FeatureStatus.ACTIVE)
        activated.append(f)
        taken += 1
    return activated


def _free_distance(grid: OccupancyGrid) -> np.ndarray:
    """Chebyshev distance of each cell to the nearest occupied cell (BFS).

    All-free grids get +inf everywhere; occupied cells get 0.
    """
    rows, cols = grid.cells.shape
    dist = np.full((rows, cols), np.inf)
    frontier = list(zip(*np.nonzero(grid.cells)))
    for r, c in frontier:
        dist[r, c] = 0.0
    d = 0.0
    while frontier:
        d += 1.0
        nxt = []
        for r, c in frontier:
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols and dist[rr, cc] > d:
                        dist[rr, cc] = d
                        nxt.append((rr, cc))
        frontier = nxt
    return dist


def update_occupancy(grid: OccupancyGrid, projections) -> OccupancyGrid:
    """Clear and re-mark the grid from projected map-point pixels.

    ``projections`` is any iterable of level-0 (u, v); points outside the
    image are skipped.  (The mapper supplies projections of every active and
    candidate point into the newest keyframe.)
    """
    grid.clear()
    for p in projections:
        if grid.in_image(p):
            grid.mark(p)
    return grid
