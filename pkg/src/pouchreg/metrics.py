"""Evaluation metrics: RMSE, Hausdorff distance, IoU and F1 (Dice)."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from .image import as_mask, boundary_pixels
from .nonrigid import ssd

log = logging.getLogger(__name__)


def rmse(a, b, region=None, valid=None) -> float:
    return math.sqrt(ssd(a, b, region, valid))


def _points(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] == 0:
        raise ValueError("Hausdorff distance needs non-empty point sets")
    return p


def directed_hausdorff(a, b) -> float:
    """max over a of the distance to the nearest point of b (exact, k-d tree)."""
    a, b = _points(a), _points(b)
    dist, _ = cKDTree(b).query(a, k=1)
    return float(dist.max())


def hausdorff(a, b) -> float:
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def hausdorff_masks(a, b) -> float:
    """HD between the boundary pixel sets of two masks."""
    return hausdorff(boundary_pixels(a), boundary_pixels(b))


def _overlap(a, b):
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def iou(a, b) -> float:
    inter, na, nb = _overlap(a, b)
    union = na + nb - inter
    if union == 0:
        log.warning("IoU of two empty masks taken as 1.0")
        return 1.0
    return inter / union


def f1(a, b) -> float:
    inter, na, nb = _overlap(a, b)
    if na + nb == 0:
        log.warning("F1 of two empty masks taken as 1.0")
        return 1.0
    return 2 * inter / (na + nb)


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())
