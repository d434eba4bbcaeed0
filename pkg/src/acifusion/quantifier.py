"""Deterministic quantification of anterior-chamber features from
calibrated AS-OCT cross-sections.

Pipeline per image: extract the chamber's upper boundary from a
segmentation mask, place two millimetre-calibrated rectangular regions
(a 2 mm x 4 mm measurement window inside the chamber and a 1 mm x 2 mm
air reference at the top-left corner), detect bright cell candidates by
thresholding with adjacency merging, and form the aqueous-to-air
relative intensity as the ratio of mean intensities with cell pixels
excluded.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

AREA1_LONG_MM = 4.0  # window side parallel to the boundary chord
AREA1_SHORT_MM = 2.0  # window side extending into the chamber
AREA2_WIDTH_MM = 2.0
AREA2_HEIGHT_MM = 1.0
SCAN_WIDTH_MM = 16.0  # anterior-segment scan field
SCAN_HEIGHT_MM = 6.0


@dataclass(frozen=True)
class AsOctImage:
    """Grayscale cross-section with millimetre-per-pixel calibration."""

    pixels: np.ndarray  # (H, W), values in [0, 255]
    mm_per_px_x: float
    mm_per_px_y: float

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"expected 2-D pixels, got shape {self.pixels.shape}")
        if self.mm_per_px_x <= 0 or self.mm_per_px_y <= 0:
            raise ValueError("calibration factors must be positive")

    @classmethod
    def from_scan_field(cls, pixels: np.ndarray) -> "AsOctImage":
        """Default calibration: the scan field divided by the pixel grid."""
        h, w = pixels.shape
        return cls(pixels=np.asarray(pixels, dtype=np.float64),
                   mm_per_px_x=SCAN_WIDTH_MM / w,
                   mm_per_px_y=SCAN_HEIGHT_MM / h)

    @property
    def px_area_mm2(self) -> float:
        return self.mm_per_px_x * self.mm_per_px_y


@dataclass(frozen=True)
class AcMask:
    """Boolean anterior-chamber mask matching its image's extents."""

    mask: np.ndarray

    def __post_init__(self):
        if self.mask.ndim != 2 or self.mask.dtype != np.bool_:
            raise ValueError("mask must be a 2-D boolean array")


@dataclass(frozen=True)
class RoiGeometry:
    """Rasterised measurement window (area1) and air reference (area2)."""

    endpoints: tuple[tuple[int, int], tuple[int, int]]  # (x, y) left, right
    area1_mask: np.ndarray
    area2_mask: np.ndarray
    area1_corners_mm: np.ndarray  # (4, 2) in mm space

    @property
    def n_area1(self) -> int:
        return int(self.area1_mask.sum())

    @property
    def n_area2(self) -> int:
        return int(self.area2_mask.sum())


@dataclass(frozen=True)
class CellDetection:
    candidate_mask: np.ndarray
    components: tuple[np.ndarray, ...]  # each (k, 2) of (y, x) pixel coords
    count: int
    total_cell_area_mm2: float


@dataclass(frozen=True)
class QuantResult:
    cell_count: int
    total_cell_area_mm2: float
    ari: float


@dataclass(frozen=True)
class ThresholdRule:
    """Cell threshold: absolute value, or relative to air statistics
    (mean + k * std over area2), which makes detection scale-invariant."""

    kind: str = "relative"
    k: float = 5.0
    value: float = 0.0

    def resolve(self, image: AsOctImage, rois: RoiGeometry) -> float:
        if self.kind == "absolute":
            return float(self.value)
        if self.kind == "relative":
            air = image.pixels[rois.area2_mask]
            return float(air.mean() + self.k * air.std())
        raise ValueError(f"unknown threshold kind {self.kind!r}")


@dataclass(frozen=True)
class QuantConfig:
    threshold: ThresholdRule = field(default_factory=ThresholdRule)
    connectivity: int = 8
    boundary_offset_px: int = 1


def extract_boundary(mask: AcMask) -> tuple[tuple[int, int], tuple[int, int]]:
    """Endpoints (x, y) of the chamber's upper boundary, leftmost first.

    The boundary is the topmost mask pixel of each occupied column.
    """
    m = mask.mask
    if not m.any():
        raise ValueError("empty anterior-chamber mask")
    cols = np.flatnonzero(m.any(axis=0))
    if cols.size < 2:
        raise ValueError("mask spans fewer than 2 columns; no boundary chord")
    top_rows = m.argmax(axis=0)
    left, right = int(cols[0]), int(cols[-1])
    return (left, int(top_rows[left])), (right, int(top_rows[right]))


def _px_center_mm(x: float, y: float, image: AsOctImage) -> np.ndarray:
    return np.array([(x + 0.5) * image.mm_per_px_x, (y + 0.5) * image.mm_per_px_y])


def place_rois(
    endpoints: Sequence[tuple[int, int]],
    image: AsOctImage,
    boundary_offset_px: int = 1,
) -> RoiGeometry:
    """Rasterise the measurement window and the air reference.

    The window is centred on the boundary chord's midpoint with its long
    (4 mm) side parallel to the chord and offset one pixel into the
    chamber; the air reference is anchored at the image's top-left
    corner.  Geometry is computed in mm space so "true intraocular
    distance" survives anisotropic calibration; pixels are included by a
    half-open center-in-rectangle test.
    """
    (x0, y0), (x1, y1) = endpoints
    if (x0, y0) == (x1, y1):
        raise ValueError("degenerate boundary chord: endpoints are identical")
    h, w = image.pixels.shape
    p0 = _px_center_mm(x0, y0, image)
    p1 = _px_center_mm(x1, y1, image)
    chord = p1 - p0
    u = chord / np.linalg.norm(chord)  # along the chord
    n = np.array([-u[1], u[0]])
    if n[1] < 0:  # rows grow downward, into the chamber
        n = -n
    mid = 0.5 * (p0 + p1)
    origin = mid + n * (boundary_offset_px * image.mm_per_px_y) - u * (AREA1_LONG_MM / 2.0)
    corners = np.array(
        [
            origin,
            origin + u * AREA1_LONG_MM,
            origin + u * AREA1_LONG_MM + n * AREA1_SHORT_MM,
            origin + n * AREA1_SHORT_MM,
        ]
    )

    # bounds check in pixel space, reporting how far the window overflows
    px_corners = corners / np.array([image.mm_per_px_x, image.mm_per_px_y])
    over = {
        "left": float(max(0.0, -px_corners[:, 0].min())),
        "right": float(max(0.0, px_corners[:, 0].max() - w)),
        "top": float(max(0.0, -px_corners[:, 1].min())),
        "bottom": float(max(0.0, px_corners[:, 1].max() - h)),
    }
    if any(v > 0 for v in over.values()):
        detail = ", ".join(f"{side} by {amt:.1f}px" for side, amt in over.items() if amt > 0)
        raise ValueError(f"measurement window exceeds image bounds: {detail}")

    xs = (np.arange(w) + 0.5) * image.mm_per_px_x
    ys = (np.arange(h) + 0.5) * image.mm_per_px_y
    gx, gy = np.meshgrid(xs, ys)
    rel = np.stack([gx - origin[0], gy - origin[1]], axis=-1)
    along = rel @ u
    into = rel @ n
    area1 = (along >= 0) & (along < AREA1_LONG_MM) & (into >= 0) & (into < AREA1_SHORT_MM)

    area2 = (gx < AREA2_WIDTH_MM) & (gy < AREA2_HEIGHT_MM)
    if not area2.any():
        raise ValueError("air reference region is empty; image smaller than 1mm x 2mm")
    if (area1 & area2).any():
        raise ValueError("measurement window overlaps the air reference region")
    return RoiGeometry(
        endpoints=((x0, y0), (x1, y1)),
        area1_mask=area1,
        area2_mask=area2,
        area1_corners_mm=corners,
    )


_NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_NEIGHBORS_8 = _NEIGHBORS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def _flood_components(mask: np.ndarray, connectivity: int) -> list[np.ndarray]:
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    offsets = _NEIGHBORS_4 if connectivity == 4 else _NEIGHBORS_8
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for y, x in zip(*np.nonzero(mask)):
        if seen[y, x]:
            continue
        queue = deque([(y, x)])
        seen[y, x] = True
        pixels = []
        while queue:
            cy, cx = queue.popleft()
            pixels.append((cy, cx))
            for dy, dx in offsets:
                ny, nx = cy + dy, cx + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        components.append(np.array(pixels))
    return components


def detect_cells(
    image: AsOctImage,
    rois: RoiGeometry,
    threshold: float,
    connectivity: int = 8,
) -> CellDetection:
    """Candidate pixels are window pixels strictly above ``threshold``;
    adjacent candidates merge into one cell."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    candidates = rois.area1_mask & (image.pixels > threshold)
    components = _flood_components(candidates, connectivity)
    return CellDetection(
        candidate_mask=candidates,
        components=tuple(components),
        count=len(components),
        total_cell_area_mm2=float(candidates.sum()) * image.px_area_mm2,
    )


def compute_ari(image: AsOctImage, rois: RoiGeometry, detection: CellDetection) -> float:
    """Mean window intensity (cells excluded) over mean air intensity."""
    remaining = rois.area1_mask & ~detection.candidate_mask
    if not remaining.any():
        raise ValueError("all of Area1 classified as cells; intensity ratio undefined")
    air_mean = float(image.pixels[rois.area2_mask].mean())
    if air_mean <= 0:
        raise ValueError("zero air intensity in the reference region")
    return float(image.pixels[remaining].mean()) / air_mean


def quantify_image(
    image: AsOctImage, mask: AcMask, config: QuantConfig = QuantConfig()
) -> tuple[CellDetection, float, RoiGeometry]:
    endpoints = extract_boundary(mask)
    rois = place_rois(endpoints, image, config.boundary_offset_px)
    thr = config.threshold.resolve(image, rois)
    detection = detect_cells(image, rois, thr, config.connectivity)
    ari = compute_ari(image, rois, detection)
    return detection, ari, rois


def quantify_eye(
    images: Sequence[AsOctImage],
    masks: Sequence[AcMask],
    config: QuantConfig = QuantConfig(),
) -> QuantResult:
    """Quantify an eye from its 3 cross-sections: averages of the
    per-image results, with counts rounded half-up."""
    if len(images) != 3 or len(masks) != 3:
        raise ValueError(f"expected 3 calibrated images with masks, got {len(images)}/{len(masks)}")
    counts, areas, aris = [], [], []
    for i, (img, msk) in enumerate(zip(images, masks)):
        try:
            detection, ari, _ = quantify_image(img, msk, config)
        except ValueError as exc:
            raise ValueError(f"image {i + 1}: {exc}") from exc
        counts.append(detection.count)
        areas.append(detection.total_cell_area_mm2)
        aris.append(ari)
    mean_count = sum(counts) / 3.0
    return QuantResult(
        cell_count=int(math.floor(mean_count + 0.5)),
        total_cell_area_mm2=sum(areas) / 3.0,
        ari=sum(aris) / 3.0,
    )


def heuristic_mask(pixels: np.ndarray, bright_fraction: float = 0.5) -> AcMask:
    """Layer-structure fallback segmenter for synthetic cross-sections.

    Finds the bright cornea band by row intensity, takes the dark region
    between it and the next bright structure as the chamber, limited to
    the cornea's column extent.  Only valid for the layered synthetic
    renders; real scans need precomputed masks.
    """
    px = np.asarray(pixels, dtype=np.float64)
    bright_thr = 0.5 * (np.median(px) + np.percentile(px, 99))
    bright = px > bright_thr
    row_frac = bright.mean(axis=1)
    bright_rows = np.flatnonzero(row_frac > bright_fraction)
    if bright_rows.size == 0:
        raise ValueError("no bright band found; not a layered synthetic image")
    top = bright_rows[0]
    run_end = top
    while run_end + 1 < px.shape[0] and row_frac[run_end + 1] > bright_fraction:
        run_end += 1
    below = np.flatnonzero(row_frac[run_end + 1 :] > bright_fraction)
    floor = (run_end + 1 + below[0]) if below.size else px.shape[0]
    cols = np.flatnonzero(bright[top : run_end + 1].any(axis=0))
    mask = np.zeros(px.shape, dtype=bool)
    if run_end + 1 < floor and cols.size:
        mask[run_end + 1 : floor, cols[0] : cols[-1] + 1] = True
    return AcMask(mask=mask)
