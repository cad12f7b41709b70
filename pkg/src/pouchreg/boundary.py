"""Boundary refinement by minimum-cost closed path in a polar unwrapping.

The mask's boundary is resampled along rays from its centroid; each ray is a
column of candidate radii weighted by the negated gradient magnitude of the
smoothed image, and dynamic programming picks one radius per ray under a
smoothness constraint that also wraps around from the last ray to the first.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .image import EmptyMaskError, as_image, as_mask, centroid, gaussian_filter, gradient_magnitude, sample_bilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    smoothing_sigma: float = 2.0
    radial_samples: int = 41
    angular_samples: int = 360
    max_radial_jump: int = 2
    band_fraction: float = 0.25

    def __post_init__(self):
        if self.radial_samples < 8 or self.angular_samples < 16 or self.max_radial_jump < 1:
            raise ValueError("need radial_samples >= 8, angular_samples >= 16, max_radial_jump >= 1")
        if not 0 < self.band_fraction < 1:
            raise ValueError("band_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> RefineConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefineResult:
    mask: np.ndarray
    polygon: np.ndarray  # (angular_samples, 2) of (x, y)
    rows: np.ndarray
    radii: np.ndarray  # (angular_samples, radial_samples) candidate radii
    center: tuple[float, float]
    cost: float
    clipped: bool


def _window_min(values: np.ndarray, jump: int, tol: float = 1e-12):
    """Min over ``|r' - r| <= jump`` along the last axis, smallest index on ties."""
    n = values.shape[-1]
    best = np.full(values.shape, np.inf)
    arg = np.zeros(values.shape, dtype=np.intp)
    # scan candidates from low to high index; only a strictly better value wins
    for d in range(-jump, jump + 1):
        lo, hi = max(0, -d), min(n, n - d)
        if lo >= hi:
            continue
        cand = np.full(values.shape, np.inf)
        cand[..., lo:hi] = values[..., lo + d : hi + d]
        finite = np.isfinite(best)
        thresh = np.where(finite, best - tol * np.maximum(1.0, np.abs(np.where(finite, best, 0.0))), np.inf)
        better = cand < thresh
        best = np.where(better, cand, best)
        idx = np.arange(n) + d
        arg = np.where(better, idx, arg)
    return best, arg


def min_closed_path(weights: np.ndarray, max_jump: int, tol: float = 1e-12):
    """Minimum-weight closed path through a ``(columns, rows)`` weight grid.

    Visits one row per column with ``|row[j+1] - row[j]| <= max_jump`` and the
    same bound between the last and first column. Ties go to the smallest
    start row, then the lexicographically smallest row sequence. Returns
    ``(rows, cost)``.
    """
    w = np.asarray(weights, dtype=np.float64)
    cols, nrows = w.shape
    if cols < 2:
        raise ValueError("need at least two columns")
    starts = np.arange(nrows)
    r = np.arange(nrows)
    # value[s, r]: best cost of columns j..cols-1 given start s and row r at j
    close_ok = np.abs(r[None, :] - starts[:, None]) <= max_jump
    value = np.where(close_ok, w[cols - 1][None, :], np.inf)
    choices = np.zeros((cols, nrows, nrows), dtype=np.intp)
    for j in range(cols - 2, 0, -1):
        best, arg = _window_min(value, max_jump, tol)
        value = w[j][None, :] + best
        choices[j] = arg
    best, arg = _window_min(value, max_jump, tol)
    totals = w[0] + best[starts, starts]
    choices[0] = arg
    finite = np.isfinite(totals)
    if not finite.any():
        raise ValueError("no feasible closed path")
    m = totals[finite].min()
    start = int(np.nonzero(finite & (totals <= m + tol * max(1.0, abs(m))))[0][0])
    rows = np.empty(cols, dtype=np.intp)
    rows[0] = start
    for j in range(cols - 1):
        rows[j + 1] = choices[j][start, rows[j]]
    return rows, float(w[np.arange(cols), rows].sum())


def path_cost(weights: np.ndarray, rows) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(w[np.arange(w.shape[0]), np.asarray(rows)].sum())


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask.copy()
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def _ray_radius(mask: np.ndarray, cx: float, cy: float, angle: float, step: float = 0.25) -> float:
    """Distance along a ray to the first nearest-pixel sample outside the mask."""
    h, w = mask.shape
    dx, dy = math.cos(angle), math.sin(angle)
    t = 0.0
    limit = math.hypot(h, w)
    while t < limit:
        t += step
        xi = int(round(cx + t * dx))
        yi = int(round(cy + t * dy))
        if not (0 <= xi < w and 0 <= yi < h) or not mask[yi, xi]:
            return max(t - step / 2, 1.0)
    return limit


def _max_inside_radius(cx, cy, angle, shape) -> float:
    """Largest t keeping (cx, cy) + t (cos, sin) within [0, w-1] x [0, h-1]."""
    h, w = shape
    limits = []
    dx, dy = math.cos(angle), math.sin(angle)
    if dx > 1e-12:
        limits.append((w - 1 - cx) / dx)
    elif dx < -1e-12:
        limits.append(-cx / dx)
    if dy > 1e-12:
        limits.append((h - 1 - cy) / dy)
    elif dy < -1e-12:
        limits.append(-cy / dy)
    return min(limits)


def polygon_to_mask(polygon: np.ndarray, shape) -> np.ndarray:
    """Even-odd rasterization at pixel centers."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)
    inside = np.zeros(shape, dtype=bool)
    px = polygon[:, 0]
    py = polygon[:, 1]
    qx = np.roll(px, -1)
    qy = np.roll(py, -1)
    for x1, y1, x2, y2 in zip(px, py, qx, qy):
        if y1 == y2:
            continue
        crosses = (ys >= min(y1, y2)) & (ys < max(y1, y2))
        xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < xint)
    return inside


def refine_boundary(img, initial, cfg: RefineConfig | None = None) -> RefineResult:
    cfg = cfg or RefineConfig()
    img = as_image(img)
    mask = as_mask(initial)
    if not mask.any():
        raise EmptyMaskError("initial mask is empty")
    mask = largest_component(mask)
    cx, cy = centroid(mask)
    h, w = img.shape
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        raise ValueError("mask centroid lies outside the image")

    grad = gradient_magnitude(gaussian_filter(img, cfg.smoothing_sigma))
    angles = 2.0 * math.pi * np.arange(cfg.angular_samples) / cfg.angular_samples
    frac = np.linspace(-cfg.band_fraction, cfg.band_fraction, cfg.radial_samples)
    radii = np.empty((cfg.angular_samples, cfg.radial_samples))
    clipped = False
    for j, a in enumerate(angles):
        r0 = _ray_radius(mask, cx, cy, a)
        col = r0 * (1.0 + frac)
        rmax = _max_inside_radius(cx, cy, a, img.shape)
        if col[-1] > rmax:
            clipped = True
            col = np.minimum(col, rmax)
        radii[j] = col
    if clipped:
        log.warning("search band leaves the image; clipped to the border")
    px = cx + radii * np.cos(angles)[:, None]
    py = cy + radii * np.sin(angles)[:, None]
    values, _ = sample_bilinear(grad, px.ravel(), py.ravel())
    weights = -values.reshape(radii.shape)

    rows, cost = min_closed_path(weights, cfg.max_radial_jump)
    sel = np.arange(cfg.angular_samples)
    polygon = np.column_stack([px[sel, rows], py[sel, rows]])
    return RefineResult(polygon_to_mask(polygon, img.shape), polygon, rows, radii, (cx, cy), cost, clipped)
