"""Heatmap targets, multi-scale averaging and peak extraction.

Pixel ``(r, c)`` covers the continuous point ``(c + 0.5, r + 0.5)``; that
convention is shared by rendering and extraction so a rendered center comes
back within half a pixel on each axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import BBox, Detection, Source
from .ingest import CANONICAL_BOX, check_heatmap

log = logging.getLogger(__name__)

TRUNCATE_SIGMAS = 4.0
# Above this many max-filter survivors the plateau tie-break is vectorized.
_DENSE_CANDIDATES = 4096


@dataclass(frozen=True)
class PeakConfig:
    kernel: int = 25
    confidence_threshold: float = 0.2
    scales: tuple[float, ...] = (0.8, 1.0, 1.2)
    box_size: float = CANONICAL_BOX

    def __post_init__(self):
        if int(self.kernel) != self.kernel or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be an odd integer >= 1, got {self.kernel}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if self.box_size <= 0:
            raise ValueError("box_size must be positive")


def render_targets(centers: Sequence[tuple[float, float]], box_size: float, rows: int, cols: int) -> np.ndarray:
    """Draw one unit-amplitude Gaussian (sigma = box_size / 6) per center.

    Overlaps combine by element-wise maximum. Kernels are cut at 4 sigma.
    Returns a float32 ``(rows, cols)`` grid with values in [0, 1].
    """
    if box_size <= 0:
        raise ValueError("box_size must be positive")
    if rows <= 0 or cols <= 0:
        raise ValueError("grid dimensions must be positive")
    sigma = box_size / 6.0
    radius = TRUNCATE_SIGMAS * sigma
    grid = np.zeros((rows, cols), dtype=np.float64)
    for cx, cy in centers:
        c0, c1 = max(int(np.floor(cx - radius)), 0), min(int(np.ceil(cx + radius)) + 1, cols)
        r0, r1 = max(int(np.floor(cy - radius)), 0), min(int(np.ceil(cy + radius)) + 1, rows)
        if c0 >= c1 or r0 >= r1:
            continue
        dx = np.arange(c0, c1) + 0.5 - cx
        dy = np.arange(r0, r1) + 0.5 - cy
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        g = np.where(d2 <= radius * radius, np.exp(-d2 / (2 * sigma * sigma)), 0.0)
        np.maximum(grid[r0:r1, c0:c1], g, out=grid[r0:r1, c0:c1])
    return grid.astype(np.float32)


def _axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # corner-aligned: output 0 and n_out-1 land on input 0 and n_in-1
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resample_bilinear(grid: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinear resize with corner-aligned mapping and edge clamping (float64)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape == (rows, cols):
        return grid.copy()
    r_lo, r_hi, fr = _axis_coords(rows, grid.shape[0])
    c_lo, c_hi, fc = _axis_coords(cols, grid.shape[1])
    # a + f * (b - a) keeps constant regions exact
    top, bottom = grid[r_lo], grid[r_hi]
    rowmix = top + fr[:, None] * (bottom - top)
    left, right = rowmix[:, c_lo], rowmix[:, c_hi]
    return left + fc[None, :] * (right - left)


def multiscale_average(maps: Sequence[tuple[float, np.ndarray]], base_rows: int, base_cols: int) -> np.ndarray:
    """Bring each ``(scale, grid)`` to the base size and take the plain mean.

    A map must measure ``round(base * scale)`` within one pixel on both axes.
    """
    if not maps:
        raise ValueError("no heatmaps to average")
    resampled = []
    for scale, grid in maps:
        grid = check_heatmap(grid, f"heatmap at scale {scale:g}")
        want_r, want_c = round(base_rows * scale), round(base_cols * scale)
        if abs(grid.shape[0] - want_r) > 1 or abs(grid.shape[1] - want_c) > 1:
            raise ValueError(
                f"heatmap at scale {scale:g} is {grid.shape[0]}x{grid.shape[1]}, "
                f"expected about {want_r}x{want_c} for base {base_rows}x{base_cols}"
            )
        resampled.append(resample_bilinear(grid, base_rows, base_cols))
    if len(resampled) == 1:
        return resampled[0]
    total = resampled[0].copy()
    for grid in resampled[1:]:
        total += grid
    return total / len(resampled)


def _has_earlier_equal(grid: np.ndarray, r: int, c: int, half: int) -> bool:
    """True if an equal-valued pixel precedes (r, c) in row-major order inside its window."""
    v = grid[r, c]
    r0, c0 = max(r - half, 0), max(c - half, 0)
    c1 = min(c + half + 1, grid.shape[1])
    above = grid[r0:r, c0:c1]
    left = grid[r, c0:c]
    return bool(np.any(above == v) or np.any(left == v))


def _earlier_equal_mask(grid: np.ndarray, half: int) -> np.ndarray:
    rows, cols = grid.shape
    padded = np.full((rows + 2 * half, cols + 2 * half), np.nan)
    padded[half:half + rows, half:half + cols] = grid
    hit = np.zeros(grid.shape, dtype=bool)
    for dr in range(-half, 1):
        for dc in range(-half, half + 1):
            if dr == 0 and dc >= 0:
                break
            shifted = padded[half + dr:half + dr + rows, half + dc:half + dc + cols]
            hit |= shifted == grid
    return hit


def find_peaks(grid: np.ndarray, kernel: int, threshold: float) -> list[tuple[int, int]]:
    """``(row, col)`` of pixels equal to their windowed max and above ``threshold``.

    Windows are ``kernel x kernel`` clipped at the border. On a plateau only
    the first pixel in row-major order inside a window counts. Output is in
    row-major order.
    """
    grid = np.asarray(grid, dtype=np.float64)
    half = kernel // 2
    # mode="nearest" only repeats edge pixels, so the max equals the clipped-window max
    local_max = maximum_filter(grid, size=kernel, mode="nearest")
    candidates = (grid == local_max) & (grid > threshold)
    rows, cols = np.nonzero(candidates)
    if len(rows) > _DENSE_CANDIDATES:
        keep = ~_earlier_equal_mask(grid, half)[rows, cols]
        return list(zip(rows[keep].tolist(), cols[keep].tolist()))
    return [(r, c) for r, c in zip(rows.tolist(), cols.tolist()) if not _has_earlier_equal(grid, r, c, half)]


def extract_peaks(grid: np.ndarray, config: PeakConfig, image_id: str) -> list[Detection]:
    """Heatmap peaks as standardized detections with ``source=heatmap``.

    Confidence is the heatmap value, capped at 1.
    """
    grid = check_heatmap(grid)
    dets = []
    for r, c in find_peaks(grid, config.kernel, config.confidence_threshold):
        value = float(grid[r, c])
        if value > 1.0:
            log.debug("%s: peak value %g at (%d, %d) capped to 1", image_id, value, r, c)
            value = 1.0
        dets.append(Detection(image_id, BBox(c + 0.5, r + 0.5, config.box_size, config.box_size), value, Source.HEATMAP))
    return dets


def peaks_from_scales(maps: dict[float, np.ndarray], config: PeakConfig, image_id: str,
                      base_shape: tuple[int, int] | None = None) -> list[Detection]:
    """Average the configured scales of one image, then extract peaks.

    The base grid defaults to the scale-1.0 map's shape.
    """
    missing = [s for s in config.scales if s not in maps]
    if missing:
        raise ValueError(f"{image_id}: no heatmap for scale(s) {', '.join(f'{s:g}' for s in missing)}")
    if base_shape is None:
        if 1.0 in maps:
            base_shape = maps[1.0].shape
        else:
            s = config.scales[0]
            base_shape = (round(maps[s].shape[0] / s), round(maps[s].shape[1] / s))
    averaged = multiscale_average([(s, maps[s]) for s in config.scales], *base_shape)
    return extract_peaks(averaged, config, image_id)
