"""Feature-lifecycle oracles: Shi-Tomasi against closed-form eigenvalues,
detection counts against rendered geometric ground truth, descriptors against
their invariances, and matching/activation policies against brute-force
re-implementations."""

from dataclasses import replace

import numpy as np
import pytest

from fusevo.config import Config
from fusevo.errors import OutOfImage
from fusevo.features import (
    DESC_MARGIN,
    PATTERN_OFFSETS,
    Feature,
    FeatureKind,
    FeatureStatus,
    OccupancyGrid,
    _free_distance,
    _LEGAL_TRANSITIONS,
    _nms,
    activate_features,
    compute_descriptor,
    detect_corners,
    hamming_distance,
    match_corners,
    sample_pixel_candidates,
    shi_tomasi_score,
    update_occupancy,
)
from fusevo.geometry import CameraIntrinsics, FrameState
from fusevo.pyramid import build_pyramid

RNG = np.random.default_rng(55901)


def _pyr(img):
    h, w = img.shape
    intr = CameraIntrinsics(100.0, 100.0, w / 2.0, h / 2.0, w, h)
    return build_pyramid(img, intr, num_levels=1)


def _plane(img):
    return _pyr(img).levels[0]


def _texture(h=160, w=200, amp=35.0):
    # band-limited random texture: smooth enough for stable scores, busy
    # enough that corners appear everywhere
    img = np.zeros((h, w))
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    for k in (5.0, 11.0, 29.0):
        ph = RNG.uniform(0, 2 * np.pi, size=2)
        img += (
            RNG.uniform(0.4, 1.0)
            * amp
            * np.sin(2 * np.pi * u / k + ph[0])
            * np.cos(2 * np.pi * v / k + ph[1])
        )
    return img - img.min() + 20.0


def _corner_feature(u, v, desc=None, score=100.0, idepth=1.0):
    return Feature(
        kind=FeatureKind.CORNER,
        host_keyframe=-1,
        p=np.array([float(u), float(v)]),
        idepth=idepth,
        score=score,
        descriptor=desc,
    )


# ---------------------------------------------------------------- saliency


def test_shi_tomasi_matches_eigenvalue_oracle():
    plane = _plane(_texture())
    for _ in range(100):
        u = int(RNG.integers(3, plane.width - 3))
        v = int(RNG.integers(3, plane.height - 3))
        gu = plane.grad_u[v - 3 : v + 4, u - 3 : u + 4].ravel()
        gv = plane.grad_v[v - 3 : v + 4, u - 3 : u + 4].ravel()
        tensor = np.array([[gu @ gu, gu @ gv], [gu @ gv, gv @ gv]])
        want = np.linalg.eigvalsh(tensor)[0]
        got = shi_tomasi_score(plane, (u, v))
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


def test_shi_tomasi_flat_zero_and_corner_beats_edge():
    assert shi_tomasi_score(_plane(np.full((64, 64), 77.0)), (32, 32)) == 0.0

    img = np.full((96, 128), 20.0)
    img[:48, :64] = 220.0  # one quadrant: corner at (64, 48), straight edges away
    plane = _plane(img)
    corner = shi_tomasi_score(plane, (64, 48))
    edge = shi_tomasi_score(plane, (64, 24))  # same vertical edge, no second edge
    assert corner > edge


def test_shi_tomasi_window_guard():
    plane = _plane(_texture(64, 64))
    with pytest.raises(OutOfImage):
        shi_tomasi_score(plane, (2, 30))
    with pytest.raises(OutOfImage):
        shi_tomasi_score(plane, (30, 62))


# ---------------------------------------------------------------- detection


def test_detect_constant_image_empty():
    assert detect_corners(_pyr(np.full((96, 128), 50.0)), Config()) == []


def _square_image(size, h=96, w=128, u0=60, v0=44):
    img = np.zeros((h, w))
    img[v0 : v0 + size, u0 : u0 + size] = 200.0
    true = [
        (u0, v0),
        (u0 + size - 1, v0),
        (u0, v0 + size - 1),
        (u0 + size - 1, v0 + size - 1),
    ]
    return img, true


@pytest.mark.parametrize("size", [7, 20])
def test_detect_square_yields_four_corners(size):
    img, true = _square_image(size)
    feats = detect_corners(_pyr(img), Config())
    assert len(feats) == 4
    for t in true:
        near = [
            f for f in feats if max(abs(f.p[0] - t[0]), abs(f.p[1] - t[1])) <= 2.0
        ]
        assert len(near) == 1


def test_detect_tiny_square_responses_merge():
    # at 5x5 the four corner responses peak one pixel inside the square, so
    # they sit pairwise within the 3 px suppression radius and collapse; what
    # survives must still localize on the square's corners
    img, true = _square_image(5)
    feats = detect_corners(_pyr(img), Config())
    assert len(feats) >= 1
    for f in feats:
        assert min(
            max(abs(f.p[0] - t[0]), abs(f.p[1] - t[1])) for t in true
        ) <= 2.0


def test_detect_checkerboard_recovers_interior_junctions():
    # four-level checkerboard: color by (row+col) parity, shade by row parity,
    # so diagonal blocks differ and every X-junction is visible to a segment
    # test (equal-brightness diagonals would make junctions pure saddles)
    B = 28
    img = np.zeros((224, 224))
    for r in range(8):
        for c in range(8):
            if (r + c) % 2 == 0:
                img[r * B : (r + 1) * B, c * B : (c + 1) * B] = (
                    230.0 if r % 2 == 0 else 170.0
                )
            else:
                img[r * B : (r + 1) * B, c * B : (c + 1) * B] = (
                    20.0 if r % 2 == 0 else 80.0
                )
    feats = detect_corners(_pyr(img), Config())
    junctions = [(u, v) for u in range(B, 224, B) for v in range(B, 224, B)]
    assert len(junctions) == 49
    hit = sum(
        1
        for j in junctions
        if any(max(abs(f.p[0] - j[0]), abs(f.p[1] - j[1])) <= 3.0 for f in feats)
    )
    assert hit >= 45  # 49 less 10% tolerance
    # and nothing fires away from a junction (block interiors are flat,
    # straight edges are culled by the min-eigenvalue gate)
    for f in feats:
        assert min(
            max(abs(f.p[0] - j[0]), abs(f.p[1] - j[1])) for j in junctions
        ) <= 3.0


def test_detect_order_margin_cap_and_fields():
    pyr = _pyr(_texture())
    plane = pyr.levels[0]
    cfg = replace(Config(), max_corners=25)
    feats = detect_corners(pyr, cfg, host_keyframe=7)
    assert 0 < len(feats) <= 25
    scores = [f.score for f in feats]
    assert scores == sorted(scores, reverse=True)
    for f in feats:
        assert f.kind is FeatureKind.CORNER
        assert f.status is FeatureStatus.CANDIDATE
        assert f.host_keyframe == 7
        assert DESC_MARGIN <= f.p[0] < plane.width - DESC_MARGIN
        assert DESC_MARGIN <= f.p[1] < plane.height - DESC_MARGIN
        assert f.score >= cfg.min_shi_tomasi
        assert f.score == pytest.approx(shi_tomasi_score(plane, f.p), rel=1e-12)
        assert f.descriptor.dtype == np.uint8 and f.descriptor.shape == (32,)
        # patch holds the image intensities over the residual pattern
        u, v = int(f.p[0]), int(f.p[1])
        want = [
            plane.intensities[v + int(dv), u + int(du)]
            for du, dv in PATTERN_OFFSETS
        ]
        np.testing.assert_allclose(f.patch, want, rtol=0, atol=1e-12)


def test_nms_matches_brute_force():
    shape = (60, 80)
    for _ in range(20):
        n = int(RNG.integers(5, 120))
        pts = np.column_stack(
            [RNG.integers(0, shape[1], n), RNG.integers(0, shape[0], n)]
        ).astype(np.float64)
        scores = RNG.uniform(0, 100, n)
        keep = list(_nms(pts, scores, 3, shape))
        want = []
        for i in np.argsort(-scores, kind="stable"):
            if all(
                max(abs(pts[i, 0] - pts[j, 0]), abs(pts[i, 1] - pts[j, 1])) > 3
                for j in want
            ):
                want.append(i)
        assert keep == want


def test_pattern_offsets_shape():
    assert len(PATTERN_OFFSETS) == 8
    assert tuple(PATTERN_OFFSETS[0]) == (0.0, 0.0)
    assert len({tuple(o) for o in PATTERN_OFFSETS}) == 8
    assert (np.hypot(PATTERN_OFFSETS[:, 0], PATTERN_OFFSETS[:, 1]) <= 4.0).all()


# ---------------------------------------------------------------- status machine


def test_status_machine_legality():
    assert _LEGAL_TRANSITIONS == {
        (FeatureStatus.CANDIDATE, FeatureStatus.ACTIVE),
        (FeatureStatus.CANDIDATE, FeatureStatus.OUTLIER),
        (FeatureStatus.ACTIVE, FeatureStatus.MARGINALIZED),
        (FeatureStatus.ACTIVE, FeatureStatus.OUTLIER),
    }
    for old in FeatureStatus:
        for new in FeatureStatus:
            f = Feature(
                kind=FeatureKind.PIXEL, host_keyframe=0, p=np.array([5.0, 5.0])
            )
            f.status = old
            if old is new:
                f.set_status(new)  # self-transition is a no-op
                assert f.status is old
            elif (old, new) in _LEGAL_TRANSITIONS:
                f.set_status(new)
                assert f.status is new
            else:
                with pytest.raises(ValueError):
                    f.set_status(new)


def test_pixel_features_reject_corner_fields():
    with pytest.raises(ValueError):
        Feature(
            kind=FeatureKind.PIXEL, host_keyframe=0, p=np.zeros(2), score=1.0
        )
    with pytest.raises(ValueError):
        Feature(
            kind=FeatureKind.PIXEL,
            host_keyframe=0,
            p=np.zeros(2),
            descriptor=np.zeros(32, dtype=np.uint8),
        )


# ---------------------------------------------------------------- descriptor


def test_descriptor_deterministic_and_affine_invariant():
    img = _texture(96, 96)
    p = (48.0, 48.0)
    d1 = compute_descriptor(_plane(img), p)
    d2 = compute_descriptor(_plane(img), p)
    assert np.array_equal(d1, d2)
    # comparisons and the centroid angle are invariant to gain and offset
    d3 = compute_descriptor(_plane(1.6 * img + 12.0), p)
    assert hamming_distance(d1, d3) == 0


def _oriented_patch(theta, h=96, w=96):
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = np.cos(theta) * (u - 48) + np.sin(theta) * (v - 48)
    y = -np.sin(theta) * (u - 48) + np.cos(theta) * (v - 48)
    return (
        120.0
        + 2.2 * x
        + 35.0 * np.sin(2 * np.pi * x / 17.0) * np.cos(2 * np.pi * y / 23.0)
        + 25.0 * np.sin(2 * np.pi * (x + y) / 9.0)
    )


def test_descriptor_rotation_compensation():
    d0 = compute_descriptor(_plane(_oriented_patch(0.0)), (48, 48))
    d30 = compute_descriptor(_plane(_oriented_patch(np.pi / 6)), (48, 48))
    assert hamming_distance(d0, d30) <= 60


def test_descriptor_separates_independent_patches():
    # bits of one descriptor are fair coins, but orientation normalization
    # aligns the canonical frame with the centroid for every patch, which
    # correlates bits across independent patches: the distance distribution
    # is wider than Binomial(256, 1/2) and its mean sits below 128.  Assert
    # the distribution this process actually has.
    rng = np.random.default_rng(90210)
    intr = CameraIntrinsics(100.0, 100.0, 20.0, 20.0, 40, 40)
    descs = [
        compute_descriptor(
            build_pyramid(rng.uniform(0, 250, (40, 40)), intr, num_levels=1).levels[0],
            (20, 20),
        )
        for _ in range(1001)
    ]
    hams = np.array(
        [hamming_distance(descs[i], descs[i + 1]) for i in range(1000)]
    )
    assert 112.0 <= hams.mean() <= 136.0
    assert np.mean((hams >= 80) & (hams <= 176)) >= 0.99
    assert np.mean((hams >= 96) & (hams <= 160)) >= 0.94  # fair-coin 4-sigma band
    assert hams.min() > 64  # never confusable with a true match


def test_descriptor_window_guard():
    plane = _plane(_texture(96, 96))
    with pytest.raises(OutOfImage):
        compute_descriptor(plane, (10.0, 48.0))
    with pytest.raises(OutOfImage):
        compute_descriptor(plane, (48.0, 90.0))


def test_hamming_distance_oracle():
    for _ in range(50):
        a = RNG.integers(0, 256, 32).astype(np.uint8)
        b = RNG.integers(0, 256, 32).astype(np.uint8)
        want = bin(
            int.from_bytes(bytes(np.bitwise_xor(a, b)), "big")
        ).count("1")
        assert hamming_distance(a, b) == want
        assert hamming_distance(a, a) == 0


# ---------------------------------------------------------------- matching


def test_match_self_is_identity_for_all_corners():
    img = _texture()
    intr = CameraIntrinsics(100.0, 100.0, 100.0, 80.0, 200, 160)
    pyr = build_pyramid(img, intr, num_levels=1)
    cfg = Config()
    map_feats = detect_corners(pyr, cfg)
    frame = detect_corners(pyr, cfg)
    matches = match_corners(
        map_feats, frame, FrameState.identity(), 3.0, intr, cfg
    )
    assert len(matches) == len(map_feats) > 100
    for m in matches:
        assert m.hamming == 0
        np.testing.assert_array_equal(m.obs, m.feature.p)
    assert all(f.match_failures == 0 for f in map_feats)


def test_match_two_pixel_translation():
    img = _texture()
    shifted = np.empty_like(img)
    shifted[:, 2:] = img[:, :-2]
    shifted[:, :2] = img[:, :2]
    intr = CameraIntrinsics(100.0, 100.0, 100.0, 80.0, 200, 160)
    cfg = Config()
    map_feats = detect_corners(build_pyramid(img, intr, num_levels=1), cfg)
    frame = detect_corners(build_pyramid(shifted, intr, num_levels=1), cfg)
    # camera translation fu*tx = 2 px at unit inverse depth shifts every
    # feature by exactly (+2, 0)
    prior = FrameState(np.array([2.0 / intr.fu, 0.0, 0.0, 0.0, 0.0, 0.0]))
    matches = match_corners(map_feats, frame, prior, 5.0, intr, cfg)
    visible = [
        f for f in map_feats if f.p[0] + 2.0 <= intr.width - 1 - DESC_MARGIN
    ]
    assert all(m.hamming <= cfg.match_threshold for m in matches)
    good = sum(
        np.abs(m.obs - (m.feature.p + np.array([2.0, 0.0]))).max() <= 1.0
        for m in matches
    )
    assert good >= 0.9 * len(visible)


def _packed(flips=()):
    bits = np.zeros(256, dtype=np.uint8)
    bits[list(flips)] = 1
    return np.packbits(bits)


def test_match_window_threshold_and_ratio():
    intr = CameraIntrinsics(100.0, 100.0, 60.0, 40.0, 120, 80)
    cfg = Config()
    prior = FrameState.identity()

    # outside the search window: no match, a failure strike
    f = _corner_feature(30, 30, _packed())
    out = match_corners([f], [_corner_feature(40, 30, _packed())], prior, 5.0, intr, cfg)
    assert out == [] and f.match_failures == 1
    out = match_corners([f], [_corner_feature(40, 30, _packed())], prior, 12.0, intr, cfg)
    assert len(out) == 1 and f.match_failures == 1

    # over the Hamming acceptance threshold
    f = _corner_feature(30, 30, _packed())
    far = _corner_feature(31, 30, _packed(range(70)))
    assert match_corners([f], [far], prior, 5.0, intr, cfg) == []
    assert f.match_failures == 1

    # ratio test: 10 vs 12 is ambiguous, 5 vs 30 is not
    f = _corner_feature(30, 30, _packed())
    near = [
        _corner_feature(31, 30, _packed(range(10))),
        _corner_feature(29, 30, _packed(range(10, 22))),
    ]
    assert match_corners([f], near, prior, 5.0, intr, cfg) == []
    f = _corner_feature(30, 30, _packed())
    near = [
        _corner_feature(31, 30, _packed(range(5))),
        _corner_feature(29, 30, _packed(range(5, 35))),
    ]
    out = match_corners([f], near, prior, 5.0, intr, cfg)
    assert len(out) == 1 and out[0].hamming == 5
    np.testing.assert_array_equal(out[0].obs, near[0].p)


def test_match_one_to_one_keeps_lowest_distance():
    intr = CameraIntrinsics(100.0, 100.0, 60.0, 40.0, 120, 80)
    cfg = Config()
    loser = _corner_feature(30, 30, _packed(range(3)))
    winner = _corner_feature(31, 31, _packed(range(1)))
    corner = _corner_feature(30, 31, _packed())
    out = match_corners([loser, winner], [corner], FrameState.identity(), 5.0, intr, cfg)
    assert len(out) == 1 and out[0].feature is winner and out[0].hamming == 1
    assert loser.match_failures == 1 and winner.match_failures == 0

    # no frame corners at all: every map corner takes a strike
    feats = [_corner_feature(30, 30, _packed()), _corner_feature(50, 50, _packed())]
    assert match_corners(feats, [], FrameState.identity(), 5.0, intr, cfg) == []
    assert all(f.match_failures == 1 for f in feats)


# ---------------------------------------------------------------- occupancy


def test_occupancy_center_point_marks_nine_cells():
    grid = OccupancyGrid(100, 80, cell_size=10)
    out = update_occupancy(grid, [np.array([50.0, 40.0])])
    assert out is grid
    assert grid.cells.sum() == 9
    r, c = grid.cell_of((50.0, 40.0))
    assert grid.cells[r - 1 : r + 2, c - 1 : c + 2].all()
    assert not grid.is_free((50.0, 40.0))
    assert grid.is_free((5.0, 75.0))

    update_occupancy(grid, [np.array([0.0, 0.0])])  # clears first; corner clamps
    assert grid.cells.sum() == 4
    update_occupancy(grid, [np.array([-5.0, 3.0]), np.array([50.0, 400.0])])
    assert grid.cells.sum() == 0  # outside the image: skipped


def test_update_occupancy_matches_brute_force():
    grid = OccupancyGrid(130, 90, cell_size=10)
    pts = np.column_stack(
        [RNG.uniform(-20, 150, 30), RNG.uniform(-20, 110, 30)]
    )
    update_occupancy(grid, pts)
    want = np.zeros_like(grid.cells)
    for u, v in pts:
        if 0 <= u < 130 and 0 <= v < 90:
            r, c = int(v) // 10, int(u) // 10
            want[max(0, r - 1) : r + 2, max(0, c - 1) : c + 2] = True
    assert np.array_equal(grid.cells, want)


def test_free_distance_matches_brute_force():
    grid = OccupancyGrid(120, 90, cell_size=10)
    for _ in range(10):
        grid.clear()
        grid.cells[:] = RNG.random(grid.cells.shape) < 0.15
        dist = _free_distance(grid)
        rr, cc = np.nonzero(grid.cells)
        if len(rr) == 0:
            assert np.isinf(dist).all()
            continue
        R, C = np.mgrid[0 : grid.rows, 0 : grid.cols]
        want = np.min(
            np.maximum(
                np.abs(R[..., None] - rr), np.abs(C[..., None] - cc)
            ),
            axis=-1,
        )
        assert np.array_equal(dist, want)


# ---------------------------------------------------------------- sampling


def test_sample_pixel_candidates_vertical_edge():
    img = np.full((256, 128), 40.0)
    img[:, 64:] = 200.0
    pyr = _pyr(img)
    cfg = Config()
    grid = OccupancyGrid(128, 256, cell_size=10)
    picks = sample_pixel_candidates(pyr, grid, [], 20, cfg, host_keyframe=3)
    assert 10 <= len(picks) <= 20
    cells = []
    for f in picks:
        assert f.kind is FeatureKind.PIXEL
        assert f.status is FeatureStatus.CANDIDATE
        assert f.host_keyframe == 3
        assert f.patch is not None and f.score is None
        assert f.p[0] in (63.0, 64.0)  # on the edge column
        cells.append(grid.cell_of(f.p))
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            assert (
                max(abs(cells[i][0] - cells[j][0]), abs(cells[i][1] - cells[j][1]))
                >= 2
            )

    # near a detected corner: a 7x7 exclusion zone
    grid.clear()
    corner = _corner_feature(64, 128)
    picks = sample_pixel_candidates(pyr, grid, [corner], 20, cfg)
    for f in picks:
        assert max(abs(f.p[0] - 64), abs(f.p[1] - 128)) > 3

    # fully occupied grid, then a constant image: nothing to sample
    grid.cells[:] = True
    assert sample_pixel_candidates(pyr, grid, [], 20, cfg) == []
    empty = OccupancyGrid(128, 256, cell_size=10)
    assert sample_pixel_candidates(_pyr(np.full((256, 128), 90.0)), empty, [], 20, cfg) == []


# ---------------------------------------------------------------- activation


def _pixel_candidate(u, v, idepth=1.0, var=1e-6):
    return Feature(
        kind=FeatureKind.PIXEL,
        host_keyframe=-1,
        p=np.array([float(u), float(v)]),
        idepth=idepth,
        idepth_variance=var,
    )


def test_activate_corners_by_score_with_convergence_gate():
    grid = OccupancyGrid(200, 200, cell_size=10)
    cfg = Config()
    cands = [
        _corner_feature(15 + 40 * i, 15, score=10.0 * (i + 1)) for i in range(5)
    ]
    for f in cands:
        f.idepth_variance = 1e-6
    cands[4].idepth_variance = 0.5  # unconverged: variance >= 0.01 * idepth^2
    cands[3].idepth_variance = 0.01  # exactly at the threshold: still excluded
    out = activate_features(cands, grid, 2, 0, cfg)
    assert [f.score for f in out] == [30.0, 20.0]  # descending among eligible
    assert all(f.status is FeatureStatus.ACTIVE for f in out)
    assert cands[4].status is FeatureStatus.CANDIDATE
    assert cands[3].status is FeatureStatus.CANDIDATE

    # same cell: only the higher-scored corner fits
    grid.clear()
    a = _corner_feature(101, 101, score=5.0)
    b = _corner_feature(105, 105, score=9.0)
    a.idepth_variance = b.idepth_variance = 1e-6
    out = activate_features([a, b], grid, 10, 0, cfg)
    assert out == [b]
    assert a.status is FeatureStatus.CANDIDATE


def test_activate_spread_layout_fills_both_quotas():
    grid = OccupancyGrid(220, 220, cell_size=10)
    cfg = Config()
    slots = [(15 + 40 * i, 15 + 40 * j) for i in range(5) for j in range(4)]
    cands = [
        _corner_feature(u, v, score=50.0, idepth=1.0) for u, v in slots[:10]
    ] + [_pixel_candidate(u, v) for u, v in slots[10:]]
    for f in cands:
        f.idepth_variance = 1e-6
    out = activate_features(cands, grid, 10, 10, cfg)
    assert len(out) == 20
    cells = [grid.cell_of(f.p) for f in out]
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            assert (
                max(abs(cells[i][0] - cells[j][0]), abs(cells[i][1] - cells[j][1]))
                >= 2
            )


def test_activate_corner_outranks_pixel_at_same_spot():
    grid = OccupancyGrid(200, 200, cell_size=10)
    corner = _corner_feature(60, 60, score=80.0)
    corner.idepth_variance = 1e-6
    pixel = _pixel_candidate(60, 60)
    out = activate_features([corner, pixel], grid, 1, 1, Config())
    assert out == [corner]
    assert pixel.status is FeatureStatus.CANDIDATE


def test_activate_pixels_greedily_maximize_clearance():
    grid = OccupancyGrid(200, 200, cell_size=10)
    grid.mark((5.0, 5.0))  # seed occupancy in one corner
    far = _pixel_candidate(195, 195)
    mid = _pixel_candidate(95, 95)
    near = _pixel_candidate(45, 5)
    out = activate_features([near, mid, far], grid, 0, 3, Config())
    assert out == [far, mid, near]  # farthest-from-occupied first

    # a projections override places candidates in the grid even when the
    # host pixel lies outside the newest keyframe
    grid2 = OccupancyGrid(200, 200, cell_size=10)
    roamer = _corner_feature(500, 500, score=10.0)
    roamer.idepth_variance = 1e-6
    out = activate_features([roamer], grid2, 1, 0, Config())
    assert out == [] and roamer.status is FeatureStatus.CANDIDATE
    out = activate_features(
        [roamer], grid2, 1, 0, Config(), projections=np.array([[25.0, 25.0]])
    )
    assert out == [roamer]
    assert not grid2.is_free((25.0, 25.0))
