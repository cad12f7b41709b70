"""Multi-level FFD registration: SSD plus control-displacement penalty.

The active lattice is always the last level of the chain, i.e. the outermost
map applied to a point. With earlier maps held fixed, each pixel's position
in the active lattice is fixed too, so the displacement is linear in the
control points (``W @ phi``) and the gradient is exact up to the bilinear
image gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ffd import Lattice, RoiRect, TransformChain
from .image import (
    EmptyMaskError,
    as_image,
    as_mask,
    bounding_box,
    downsample_half,
    gaussian_filter,
    CubicSampler,
    pixel_grid,
)
from .rigid import RigidParams

log = logging.getLogger(__name__)

MIN_ROI_SIDE = 8


class DegenerateRoiError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConfig:
    reg_weight: float = 0.01
    epsilon: float = 1e-6
    max_iters: int = 100
    levels: int = 3
    base_cells: int = 4
    step: float = 1.0
    roi_margin: float = 10.0
    max_halvings: int = 12
    smoothing_sigma: float = 0.0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.levels < 1 or self.base_cells < 1:
            raise ValueError("levels and base_cells must be at least 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.step > 0:
            raise ValueError("step must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> EnergyConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def ssd(a, b, region=None, valid=None) -> float:
    """Mean squared difference over ``region`` (default: all pixels).

    ``valid`` marks pixels whose warped sample was in-domain; the rest are
    left out of the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sel = np.ones(a.shape, dtype=bool) if region is None else as_mask(region)
    if sel.shape != a.shape:
        raise ValueError("region shape does not match the images")
    if valid is not None:
        sel = sel & np.asarray(valid, dtype=bool)
    if not sel.any():
        raise ValueError("SSD over an empty region")
    d = a[sel] - b[sel]
    return float(np.mean(d * d))


class LevelProblem:
    """Energy of one active lattice with everything before it frozen.

    ``qx, qy`` are the points (in the active lattice's coordinates) that the
    frozen part of the chain sends each region pixel to; ``target`` holds the
    reference intensities at those pixels.
    """

    def __init__(self, src, target: np.ndarray, qx, qy,
                 lattice: Lattice, reg_weight: float):
        self.sampler = src if isinstance(src, CubicSampler) else CubicSampler(as_image(src))
        self.target = target
        self.qx = qx
        self.qy = qy
        self.template = lattice
        self.reg_weight = reg_weight
        self.W = lattice.weight_matrix(qx, qy)
        self.WT = self.W.T.tocsr()

    def _sample(self, phi: np.ndarray, with_gradient: bool):
        disp = self.W @ phi.reshape(-1, 2)
        return self.sampler(self.qx + disp[:, 0], self.qy + disp[:, 1], with_gradient)

    def penalty(self, phi: np.ndarray) -> float:
        return self.reg_weight * float(np.mean(np.sum(phi * phi, axis=-1)))

    def energy(self, phi: np.ndarray) -> float:
        values, valid = self._sample(phi, False)
        if not valid.any():
            return math.inf
        r = values[valid] - self.target[valid]
        return float(np.mean(r * r)) + self.penalty(phi)

    def energy_and_gradient(self, phi: np.ndarray):
        values, valid, gx, gy = self._sample(phi, True)
        count = int(valid.sum())
        if count == 0:
            return math.inf, np.zeros_like(phi)
        r = np.where(valid, values - self.target, 0.0)
        e = float(np.sum(r * r)) / count + self.penalty(phi)
        pix = np.column_stack([r * gx, r * gy]) * (2.0 / count)
        grad = (self.WT @ pix).reshape(phi.shape)
        grad += (2.0 * self.reg_weight / self.template.size) * phi
        return e, grad


def _problem_for_chain(ref, src, chain: TransformChain, cfg: EnergyConfig, region) -> LevelProblem:
    ref = as_image(ref)
    src = as_image(src)
    if not chain.levels:
        raise ValueError("chain has no active lattice")
    sel = np.ones(ref.shape, dtype=bool) if region is None else as_mask(region)
    xs, ys = pixel_grid(ref.shape)
    keep = sel.ravel()
    xs, ys = xs[keep], ys[keep]
    qx, qy = chain.prefix(chain.g - 1).apply(xs, ys)
    return LevelProblem(src, ref.ravel()[keep], qx, qy, chain.levels[-1], cfg.reg_weight)


def energy(ref, src, chain: TransformChain, cfg: EnergyConfig, region=None) -> float:
    """SSD of ``warp(src, chain)`` against ``ref`` plus the penalty on the last level."""
    problem = _problem_for_chain(ref, src, chain, cfg, region)
    return problem.energy(chain.levels[-1].displacements)


def grad_energy(ref, src, chain: TransformChain, cfg: EnergyConfig, region=None) -> np.ndarray:
    """Gradient of :func:`energy` w.r.t. the last level's displacements."""
    problem = _problem_for_chain(ref, src, chain, cfg, region)
    return problem.energy_and_gradient(chain.levels[-1].displacements)[1]


@dataclass
class LevelLog:
    rows: list = field(default_factory=list)

    def append(self, level: int, it: int, e: float, step: float) -> None:
        self.rows.append((level, it, e, step))


def optimize_problem(problem: LevelProblem, cfg: EnergyConfig, level: int = 1,
                     trace: LevelLog | None = None) -> Lattice:
    """Normalized-gradient descent with backtracking halving.

    Each iteration tries ``cfg.step`` (the largest control-point move, in
    pixels) and halves it until the energy drops. Stops once the drop is
    below ``epsilon``, no drop is found, or ``max_iters`` is reached.
    """
    lat = problem.template.copy()
    phi = lat.displacements
    if cfg.max_iters == 0:
        return lat
    e, g = problem.energy_and_gradient(phi)
    for it in range(cfg.max_iters):
        gmax = float(np.abs(g).max())
        if gmax == 0.0 or not math.isfinite(e):
            break
        direction = g / gmax
        step = cfg.step
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            trial = phi - step * direction
            e_trial = problem.energy(trial)
            if e_trial < e:
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            break
        improvement = e - e_trial
        phi = accepted
        if trace is not None:
            trace.append(level, it, e_trial, step)
        if improvement < cfg.epsilon:
            break
        e, g = problem.energy_and_gradient(phi)
    lat.displacements = phi
    return lat


def optimize_level(ref, src, chain: TransformChain, cfg: EnergyConfig, region=None):
    """Optimize the chain's last lattice; returns ``(lattice, log_rows)``."""
    problem = _problem_for_chain(ref, src, chain, cfg, region)
    trace = LevelLog()
    lat = optimize_problem(problem, cfg, chain.g, trace)
    return lat, trace.rows


def roi_rect(mask, margin: float, shape) -> RoiRect:
    """Mask bounding box grown by ``margin`` and clipped to the raster."""
    x0, x1, y0, y1 = bounding_box(mask)
    h, w = shape
    rect = (max(0.0, x0 - margin), min(float(w), x1 + 1 + margin),
            max(0.0, y0 - margin), min(float(h), y1 + 1 + margin))
    if rect[1] - rect[0] < MIN_ROI_SIDE or rect[3] - rect[2] < MIN_ROI_SIDE:
        raise DegenerateRoiError(f"ROI {rect} is smaller than {MIN_ROI_SIDE} px per side")
    return RoiRect(*rect)


def rect_mask(rect: RoiRect, shape) -> np.ndarray:
    xs, ys = pixel_grid(shape)
    return rect.contains(xs, ys).reshape(shape)


def transported_rect(rect: RoiRect, rigid: RigidParams, shape) -> RoiRect:
    """Bounding box of ``rigid(rect)``, clipped to the raster."""
    cx = np.array([rect.x_left, rect.x_right, rect.x_right, rect.x_left])
    cy = np.array([rect.y_left, rect.y_left, rect.y_right, rect.y_right])
    px, py = rigid.apply(cx, cy)
    h, w = shape
    x0, x1 = max(0.0, float(px.min())), min(float(w), float(px.max()))
    y0, y1 = max(0.0, float(py.min())), min(float(h), float(py.max()))
    if x1 - x0 < MIN_ROI_SIDE or y1 - y0 < MIN_ROI_SIDE:
        raise DegenerateRoiError("ROI moved off the source frame under the rigid map")
    return RoiRect(x0, x1, y0, y1)


def _to_level(v, scale: int):
    return (v - (scale - 1) / 2.0) / scale


def _to_full(v, scale: int):
    return v * scale + (scale - 1) / 2.0


def _scaled_lattice(lat: Lattice, scale: int) -> Lattice:
    """Express a lattice fitted on a ``scale``-times downsampled grid at full resolution."""
    d = lat.domain
    domain = RoiRect(_to_full(d.x_left, scale), _to_full(d.x_right, scale),
                     _to_full(d.y_left, scale), _to_full(d.y_right, scale))
    return Lattice(domain, lat.m, lat.n, lat.displacements * scale)


def register_nonrigid(ref, src, ref_mask, rigid: RigidParams | None = None,
                      cfg: EnergyConfig | None = None,
                      trace: LevelLog | None = None,
                      init_levels: list[Lattice] | None = None) -> TransformChain:
    """Coarse-to-fine FFD registration of ``src`` onto ``ref`` after ``rigid``.

    Level ``l`` (1-based) runs on images downsampled ``levels - l`` times with
    ``base_cells * 2**(l-1)`` cells per axis. A level whose full-resolution
    energy does not beat the chain without it is replaced by a zero lattice.
    ``init_levels`` (e.g. the previous frame's result) seeds each level's
    control displacements when the grid sizes match; otherwise levels start
    from zero.
    """
    cfg = cfg or EnergyConfig()
    ref = as_image(ref)
    src = as_image(src)
    if ref.shape != src.shape:
        raise ValueError("reference and source must share a shape")
    ref_mask = as_mask(ref_mask)
    if not ref_mask.any():
        raise EmptyMaskError("reference mask is empty")
    rigid = rigid or RigidParams()
    shape = ref.shape
    roi = roi_rect(ref_mask, cfg.roi_margin, shape)
    lat_domain = transported_rect(roi, rigid, shape)
    region = rect_mask(roi, shape)

    if cfg.smoothing_sigma > 0:
        ref_s = gaussian_filter(ref, cfg.smoothing_sigma)
        src_s = gaussian_filter(src, cfg.smoothing_sigma)
    else:
        ref_s, src_s = ref, src
    pyramid = [(ref_s, src_s, region.astype(np.float64))]
    for _ in range(cfg.levels - 1):
        r, s, m = pyramid[-1]
        pyramid.append((downsample_half(r), downsample_half(s), downsample_half(m)))

    full_sampler = CubicSampler(src_s)
    chain = TransformChain(rigid, [])
    for level in range(1, cfg.levels + 1):
        depth = cfg.levels - level
        scale = 2**depth
        ref_c, src_c, region_c = pyramid[depth]
        sel = region_c >= 0.5
        xs, ys = pixel_grid(ref_c.shape)
        keep = sel.ravel()
        fx, fy = _to_full(xs[keep], scale), _to_full(ys[keep], scale)
        qx, qy = chain.apply(fx, fy)
        cells = cfg.base_cells * 2 ** (level - 1)
        domain_c = RoiRect(_to_level(lat_domain.x_left, scale), _to_level(lat_domain.x_right, scale),
                           _to_level(lat_domain.y_left, scale), _to_level(lat_domain.y_right, scale))
        start = Lattice.zeros(domain_c, cells, cells)
        if init_levels is not None and len(init_levels) >= level:
            prev = init_levels[level - 1]
            if (prev.m, prev.n) == (cells, cells):
                start.displacements = prev.displacements / scale
        problem = LevelProblem(src_c, ref_c.ravel()[keep], _to_level(qx, scale), _to_level(qy, scale),
                               start, cfg.reg_weight)
        lat_c = optimize_problem(problem, cfg, level, trace)
        lat_f = _scaled_lattice(lat_c, scale)

        # accept the level only if it helps at full resolution
        xs_f, ys_f = pixel_grid(shape)
        keep_f = region.ravel()
        px, py = chain.apply(xs_f[keep_f], ys_f[keep_f])
        full = LevelProblem(full_sampler, ref_s.ravel()[keep_f], px, py, lat_f, cfg.reg_weight)
        e_with = full.energy(lat_f.displacements)
        e_without = full.energy(np.zeros_like(lat_f.displacements))
        if e_with <= e_without:
            chain.levels.append(lat_f)
        else:
            log.info("level %d rejected (%.6g > %.6g)", level, e_with, e_without)
            chain.levels.append(Lattice.zeros(lat_f.domain, lat_f.m, lat_f.n))
        log.debug("level %d: full-res energy %.6g -> %.6g", level, e_without, min(e_with, e_without))
    return chain
