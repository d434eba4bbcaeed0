import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acifusion import quantifier as q


def flat_chamber_image(h=120, w=160, air=20.0, cornea=160.0, aqueous=21.0,
                       floor=150.0, top=30, ac_top=45, ac_bottom=110,
                       col0=8, col1=152):
    """Layered synthetic cross-section with a flat chamber boundary."""
    px = np.full((h, w), air)
    px[top:ac_top, :] = cornea
    px[ac_top:ac_bottom, col0:col1] = aqueous
    px[ac_bottom:, :] = floor
    mask = np.zeros((h, w), dtype=bool)
    mask[ac_top:ac_bottom, col0:col1] = True
    return q.AsOctImage.from_scan_field(px), q.AcMask(mask)


# ---------------------------------------------------------------------------
# boundary extraction
# ---------------------------------------------------------------------------


def test_boundary_of_rectangle():
    mask = np.zeros((40, 100), dtype=bool)
    mask[10:21, 5:96] = True
    assert q.extract_boundary(q.AcMask(mask)) == ((5, 10), (95, 10))


def test_boundary_of_upper_half_disk():
    cy, cx, r = 30, 50, 20
    yy, xx = np.mgrid[0:60, 0:100]
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    half = disk & (yy <= cy)  # lower half removed
    left, right = q.extract_boundary(q.AcMask(half))
    assert left == (cx - r, cy)
    assert right == (cx + r, cy)


def test_boundary_rejects_empty_and_single_column():
    with pytest.raises(ValueError, match="empty"):
        q.extract_boundary(q.AcMask(np.zeros((5, 5), dtype=bool)))
    single = np.zeros((5, 5), dtype=bool)
    single[1:4, 2] = True
    with pytest.raises(ValueError, match="fewer than 2 columns"):
        q.extract_boundary(q.AcMask(single))


# ---------------------------------------------------------------------------
# ROI placement
# ---------------------------------------------------------------------------


def test_roi_pixel_counts_at_unit_calibration():
    image = q.AsOctImage(np.zeros((600, 1600)), mm_per_px_x=0.01, mm_per_px_y=0.01)
    rois = q.place_rois([(100, 150), (1500, 150)], image)
    # 4mm long side -> 400 px wide, 2mm -> 200 px tall
    assert rois.n_area1 == 400 * 200
    rows = np.flatnonzero(rois.area1_mask.any(axis=1))
    cols = np.flatnonzero(rois.area1_mask.any(axis=0))
    assert rows.size == 200 and cols.size == 400
    assert rows[0] == 151  # one pixel below the chord at row 150
    # air reference: 1mm tall x 2mm wide anchored top-left
    assert rois.n_area2 == 100 * 200
    assert rois.area2_mask[0, 0] and rois.area2_mask[99, 199]
    assert not rois.area2_mask[100, 0] and not rois.area2_mask[0, 200]
    assert not (rois.area1_mask & rois.area2_mask).any()


def test_rotated_window_area_within_one_percent():
    image = q.AsOctImage(np.zeros((600, 1600)), mm_per_px_x=0.01, mm_per_px_y=0.01)
    dx, dy = 600, int(round(600 * np.tan(np.radians(30))))
    rois = q.place_rois([(300, 120), (300 + dx, 120 + dy)], image)
    expected = (q.AREA1_LONG_MM / 0.01) * (q.AREA1_SHORT_MM / 0.01)
    assert abs(rois.n_area1 - expected) / expected < 0.01


def test_identical_endpoints_rejected():
    image = q.AsOctImage(np.zeros((100, 200)), mm_per_px_x=0.05, mm_per_px_y=0.05)
    with pytest.raises(ValueError, match="degenerate"):
        q.place_rois([(50, 20), (50, 20)], image)


def test_roi_overflow_reports_amount():
    image = q.AsOctImage(np.zeros((100, 200)), mm_per_px_x=0.05, mm_per_px_y=0.05)
    # window extends 2mm (40px) below a chord near the bottom edge
    with pytest.raises(ValueError, match=r"bottom by \d+"):
        q.place_rois([(20, 90), (180, 90)], image)


# ---------------------------------------------------------------------------
# cell detection vs an independent union-find oracle
# ---------------------------------------------------------------------------


class _DSU:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def union_find_components(mask, connectivity):
    """Brute-force component oracle, independent of the flood fill."""
    coords = list(zip(*np.nonzero(mask)))
    dsu = _DSU(coords)
    offs = [(0, 1), (1, 0)] if connectivity == 4 else [(0, 1), (1, 0), (1, 1), (1, -1)]
    present = set(coords)
    for y, x in coords:
        for dy, dx in offs:
            if (y + dy, x + dx) in present:
                dsu.union((y, x), (y + dy, x + dx))
    groups = {}
    for c in coords:
        groups.setdefault(dsu.find(c), set()).add(c)
    return {frozenset(g) for g in groups.values()}


def flood_partition(mask, connectivity):
    comps = q._flood_components(mask, connectivity)
    return {frozenset(map(tuple, comp)) for comp in comps}


def test_components_match_union_find_oracle_200_fields():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        p = rng.uniform(0.2, 0.7)
        field = rng.random((24, 32)) < p
        conn = 4 if trial % 2 == 0 else 8
        assert flood_partition(field, conn) == union_find_components(field, conn)


def test_detect_cells_counts_and_area():
    image, mask = flat_chamber_image()
    rois = q.place_rois(q.extract_boundary(mask), image)
    ys, xs = np.nonzero(rois.area1_mask)
    px = image.pixels.copy()
    # five disjoint 2x2 blobs strictly inside the window
    y0, x0 = ys.min() + 3, xs.min() + 3
    for k in range(5):
        px[y0 + 6 * k : y0 + 6 * k + 2, x0 + 6 * k : x0 + 6 * k + 2] = 220.0
    bright = q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y)
    det = q.detect_cells(bright, rois, threshold=100.0)
    assert det.count == 5
    assert det.total_cell_area_mm2 == pytest.approx(20 * image.px_area_mm2)


def test_uniform_window_below_threshold_is_zero():
    image, mask = flat_chamber_image()
    rois = q.place_rois(q.extract_boundary(mask), image)
    det = q.detect_cells(image, rois, threshold=100.0)
    assert det.count == 0
    assert det.total_cell_area_mm2 == 0.0
    assert len(det.components) == 0


def test_diagonal_touch_depends_on_connectivity():
    image, mask = flat_chamber_image()
    rois = q.place_rois(q.extract_boundary(mask), image)
    ys, xs = np.nonzero(rois.area1_mask)
    y0, x0 = ys.min() + 5, xs.min() + 5
    px = image.pixels.copy()
    px[y0, x0] = 220.0
    px[y0 + 1, x0 + 1] = 220.0
    bright = q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y)
    assert q.detect_cells(bright, rois, 100.0, connectivity=8).count == 1
    assert q.detect_cells(bright, rois, 100.0, connectivity=4).count == 2


def test_translation_of_blobs_preserves_count_and_area():
    image, mask = flat_chamber_image()
    rois = q.place_rois(q.extract_boundary(mask), image)
    ys, xs = np.nonzero(rois.area1_mask)
    results = []
    for shift in (0, 4, 9):
        px = image.pixels.copy()
        y0, x0 = ys.min() + 2 + shift, xs.min() + 2 + shift
        px[y0 : y0 + 2, x0 : x0 + 3] = 220.0
        px[y0 + 8 : y0 + 10, x0 + 10 : x0 + 12] = 220.0
        img = q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y)
        det = q.detect_cells(img, rois, 100.0)
        results.append((det.count, det.total_cell_area_mm2))
    assert results[0] == results[1] == results[2]


@given(st.integers(0, 250))
@settings(max_examples=40, derandomize=True, deadline=None)
def test_raising_threshold_never_adds_candidates(threshold):
    rng = np.random.default_rng(99)
    image, mask = flat_chamber_image()
    px = image.pixels + rng.uniform(0, 200, size=image.pixels.shape)
    img = q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y)
    rois = q.place_rois(q.extract_boundary(mask), img)
    low = q.detect_cells(img, rois, float(threshold)).candidate_mask
    high = q.detect_cells(img, rois, float(threshold) + 13.0).candidate_mask
    assert not (high & ~low).any()


# ---------------------------------------------------------------------------
# relative intensity
# ---------------------------------------------------------------------------


def test_ari_equal_means_is_one():
    image, mask = flat_chamber_image(air=100.0, aqueous=100.0)
    rois = q.place_rois(q.extract_boundary(mask), image)
    det = q.detect_cells(image, rois, threshold=120.0)
    assert q.compute_ari(image, rois, det) == pytest.approx(1.0)


def test_ari_excludes_cell_pixels():
    image, mask = flat_chamber_image(air=50.0, aqueous=100.0)
    rois = q.place_rois(q.extract_boundary(mask), image)
    ys, xs = np.nonzero(rois.area1_mask)
    px = image.pixels.copy()
    px[ys[:10], xs[:10]] = 255.0
    img = q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y)
    det = q.detect_cells(img, rois, threshold=200.0)
    assert det.candidate_mask.sum() == 10
    assert q.compute_ari(img, rois, det) == pytest.approx(2.0)


def test_ari_matches_pixel_count_form():
    rng = np.random.default_rng(5)
    image, mask = flat_chamber_image()
    px = image.pixels + rng.uniform(0, 30, size=image.pixels.shape)
    img = q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y)
    rois = q.place_rois(q.extract_boundary(mask), img)
    det = q.detect_cells(img, rois, threshold=45.0)
    ari = q.compute_ari(img, rois, det)
    # equivalent all-pixel-count formulation
    n2 = rois.n_area2
    n1 = rois.n_area1 - int(det.candidate_mask.sum())
    s1 = img.pixels[rois.area1_mask & ~det.candidate_mask].sum()
    s2 = img.pixels[rois.area2_mask].sum()
    assert ari == pytest.approx(n2 * s1 / (n1 * s2), abs=1e-12)


def test_ari_scale_invariant_with_relative_threshold():
    rng = np.random.default_rng(6)
    image, mask = flat_chamber_image()
    px = np.clip(image.pixels + rng.normal(0, 2, size=image.pixels.shape), 0, 85)
    ys, xs = np.nonzero(mask.mask)
    px[ys.min() + 10 : ys.min() + 12, 70:72] = 85.0
    cfg = q.QuantConfig(threshold=q.ThresholdRule("relative", k=5.0))

    def run(scale):
        img = q.AsOctImage(px * scale, image.mm_per_px_x, image.mm_per_px_y)
        rois = q.place_rois(q.extract_boundary(mask), img)
        thr = cfg.threshold.resolve(img, rois)
        det = q.detect_cells(img, rois, thr)
        return det.count, q.compute_ari(img, rois, det)

    count1, ari1 = run(1.0)
    count3, ari3 = run(3.0)
    assert count1 == count3
    assert abs(ari1 - ari3) <= 1e-12


def test_ari_error_cases():
    image, mask = flat_chamber_image()
    rois = q.place_rois(q.extract_boundary(mask), image)
    det_all = q.detect_cells(image, rois, threshold=0.0)  # everything is a cell
    with pytest.raises(ValueError, match="all of Area1"):
        q.compute_ari(image, rois, det_all)
    dark = q.AsOctImage(np.zeros_like(image.pixels), image.mm_per_px_x, image.mm_per_px_y)
    det_none = q.detect_cells(dark, rois, threshold=10.0)
    with pytest.raises(ValueError, match="air intensity"):
        q.compute_ari(dark, rois, det_none)


# ---------------------------------------------------------------------------
# per-eye aggregation
# ---------------------------------------------------------------------------


def _eye_with_counts(counts):
    images, masks = [], []
    for c in counts:
        image, mask = flat_chamber_image()
        rois = q.place_rois(q.extract_boundary(mask), image)
        ys, xs = np.nonzero(rois.area1_mask)
        px = image.pixels.copy()
        for k in range(c):
            y0, x0 = ys.min() + 2 + 5 * k, xs.min() + 2 + 5 * k
            px[y0 : y0 + 2, x0 : x0 + 2] = 220.0
        images.append(q.AsOctImage(px, image.mm_per_px_x, image.mm_per_px_y))
        masks.append(mask)
    return images, masks


ABS_CFG = q.QuantConfig(threshold=q.ThresholdRule("absolute", value=110.0))


def test_quantify_eye_identical_images_idempotent():
    images, masks = _eye_with_counts([4, 4, 4])
    single_det, single_ari, _ = q.quantify_image(images[0], masks[0], ABS_CFG)
    result = q.quantify_eye(images, masks, ABS_CFG)
    assert result.cell_count == single_det.count == 4
    assert result.total_cell_area_mm2 == pytest.approx(single_det.total_cell_area_mm2)
    assert result.ari == pytest.approx(single_ari)


def test_quantify_eye_exact_mean():
    images, masks = _eye_with_counts([2, 3, 4])
    assert q.quantify_eye(images, masks, ABS_CFG).cell_count == 3


def test_quantify_eye_rounds_half_up():
    images, masks = _eye_with_counts([1, 2, 2])  # mean 1.666 -> 2
    assert q.quantify_eye(images, masks, ABS_CFG).cell_count == 2


def test_quantify_eye_propagates_error_with_index():
    images, masks = _eye_with_counts([1, 1, 1])
    bad = q.AcMask(np.zeros_like(masks[1].mask))
    with pytest.raises(ValueError, match="image 2: empty"):
        q.quantify_eye(images, [masks[0], bad, masks[2]], ABS_CFG)


def test_quantify_eye_requires_three_images():
    images, masks = _eye_with_counts([1, 1, 1])
    with pytest.raises(ValueError, match="expected 3"):
        q.quantify_eye(images[:2], masks[:2], ABS_CFG)


# ---------------------------------------------------------------------------
# fallback segmenter
# ---------------------------------------------------------------------------


def test_heuristic_mask_recovers_layered_chamber():
    image, mask = flat_chamber_image()
    recovered = q.heuristic_mask(image.pixels)
    assert q.extract_boundary(recovered) == q.extract_boundary(mask)
    det_a, ari_a, _ = q.quantify_image(image, recovered, ABS_CFG)
    det_b, ari_b, _ = q.quantify_image(image, mask, ABS_CFG)
    assert det_a.count == det_b.count
    assert ari_a == pytest.approx(ari_b)
