"""Mask-driven rigid pre-alignment with regular-step gradient descent."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .image import CubicSampler, EmptyMaskError, as_mask, centroid, gaussian_filter, pixel_grid

log = logging.getLogger(__name__)


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class RigidParams:
    """Rotation by ``theta`` about ``(cx, cy)`` followed by translation ``(tx, ty)``.

    Used as a backward map: it sends reference-frame points to source-frame
    points.
    """

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def apply(self, xs, ys):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if self.is_identity:
            return xs.copy(), ys.copy()
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = xs - self.cx
        dy = ys - self.cy
        return c * dx - s * dy + self.cx + self.tx, s * dx + c * dy + self.cy + self.ty

    def inverse(self) -> RigidParams:
        # R^-1(y) = rot(-theta) (y - (c + t)) + c, i.e. center c + t, translation -t
        return RigidParams(-self.theta, -self.tx, -self.ty, self.cx + self.tx, self.cy + self.ty)

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.tx == 0.0 and self.ty == 0.0

    def to_dict(self) -> dict:
        return {"theta_rad": self.theta, "tx": self.tx, "ty": self.ty, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> RigidParams:
        return cls(float(d["theta_rad"]), float(d["tx"]), float(d["ty"]), float(d["cx"]), float(d["cy"]))


def apply_rigid(params: RigidParams, pt) -> tuple[float, float]:
    x, y = params.apply(np.array([pt[0]]), np.array([pt[1]]))
    return float(x[0]), float(y[0])


@dataclass(frozen=True)
class RigidConfig:
    initial_step: float = 2.0
    min_step: float = 1e-3
    relaxation: float = 0.5
    max_iters: int = 200
    smoothing_sigma: float = 2.0
    # finite-difference half-widths in parameter space
    delta_theta: float = 1e-3
    delta_trans: float = 0.25

    def __post_init__(self):
        if not 0 < self.min_step < self.initial_step:
            raise ValueError("need 0 < min_step < initial_step")
        if not 0 < self.relaxation < 1:
            raise ValueError("relaxation must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.smoothing_sigma < 0 or self.delta_theta <= 0 or self.delta_trans <= 0:
            raise ValueError("smoothing_sigma must be >= 0 and finite-difference widths > 0")

    @classmethod
    def from_dict(cls, d: dict) -> RigidConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RigidResult:
    params: RigidParams
    cost: float
    initial_cost: float
    iterations: int
    history: list


class _MaskCost:
    """SSD between a fixed image and a rigidly warped moving image.

    The cost must be smooth in the parameters for finite-difference
    descent, so the moving image is sampled through a cubic spline (bilinear
    sampling has a kink at every integer shift) and samples that leave the
    raster are clamped to its edge, keeping every pixel in the mean.
    """

    def __init__(self, fixed: np.ndarray, moving: np.ndarray):
        self.fixed = fixed
        self.moving = CubicSampler(moving)
        self.xs, self.ys = pixel_grid(fixed.shape)
        self.fixed_flat = fixed.ravel()

    def __call__(self, params: RigidParams) -> float:
        h, w = self.fixed.shape
        qx, qy = params.apply(self.xs, self.ys)
        values, _ = self.moving(np.clip(qx, 0, w - 1), np.clip(qy, 0, h - 1))
        r = values - self.fixed_flat
        return float(np.mean(r * r))


def register_rigid(ref_mask, src_mask, init: RigidParams | None = None,
                   cfg: RigidConfig | None = None, images=None) -> RigidResult:
    """Align ``src_mask`` to ``ref_mask`` over (theta, tx, ty).

    The rotation center is pinned to the reference-mask centroid; the
    translation of ``init`` is re-expressed for that center so a warm start
    from any previous frame describes the same map. ``images`` optionally
    replaces the masks as the matched rasters (both must still be given for
    the centroid).
    """
    cfg = cfg or RigidConfig()
    ref_mask = as_mask(ref_mask)
    src_mask = as_mask(src_mask)
    if not ref_mask.any() or not src_mask.any():
        raise EmptyMaskError("rigid registration needs non-empty masks")
    cx, cy = centroid(ref_mask)
    init = _recenter(init or RigidParams(cx=cx, cy=cy), cx, cy)

    if images is None:
        fixed, moving = ref_mask.astype(np.float64), src_mask.astype(np.float64)
    else:
        fixed, moving = (np.asarray(a, dtype=np.float64) for a in images)
    if cfg.smoothing_sigma > 0:
        fixed = gaussian_filter(fixed, cfg.smoothing_sigma)
        moving = gaussian_filter(moving, cfg.smoothing_sigma)
    cost = _MaskCost(fixed, moving)

    # rotation is scaled by the mask's RMS radius so a unit step is ~1 px of arc
    ys, xs = np.nonzero(ref_mask)
    radius = max(1.0, float(np.sqrt(np.mean((xs - cx) ** 2 + (ys - cy) ** 2))))
    scales = np.array([radius, 1.0, 1.0])

    def params_of(v):
        return RigidParams(v[0] / scales[0], v[1], v[2], cx, cy)

    def gradient(v):
        p = params_of(v)
        d = (cfg.delta_theta, cfg.delta_trans, cfg.delta_trans)
        g = np.empty(3)
        base = np.array([p.theta, p.tx, p.ty])
        for i in range(3):
            hi = base.copy()
            lo = base.copy()
            hi[i] += d[i]
            lo[i] -= d[i]
            g[i] = (cost(RigidParams(*hi, cx, cy)) - cost(RigidParams(*lo, cx, cy))) / (2 * d[i])
        # chain rule into the scaled coordinates
        return g / scales

    v = np.array([init.theta * radius, init.tx, init.ty])
    current = cost(params_of(v))
    initial_cost = current
    best_v, best_cost = v.copy(), current
    step = cfg.initial_step
    prev_g = None
    history = [current]
    it = 0
    while it < cfg.max_iters and step >= cfg.min_step:
        g = gradient(v)
        norm = float(np.linalg.norm(g))
        if norm == 0.0 or not np.isfinite(norm):
            break
        if prev_g is not None and float(np.dot(g, prev_g)) < 0:
            step *= cfg.relaxation
            if step < cfg.min_step:
                break
        v = v - step * g / norm
        prev_g = g
        current = cost(params_of(v))
        history.append(current)
        if current < best_cost:
            best_v, best_cost = v.copy(), current
        it += 1
    log.debug("rigid: %d iterations, cost %.6g -> %.6g", it, initial_cost, best_cost)
    return RigidResult(params_of(best_v), best_cost, initial_cost, it, history)


def _recenter(p: RigidParams, cx: float, cy: float) -> RigidParams:
    """Express the same rigid map with rotation center ``(cx, cy)``."""
    if p.cx == cx and p.cy == cy:
        return p
    # R(x) = rot(x - c) + c + t; with new center c': t' = rot(c' - c) + c + t - c'
    ox, oy = p.apply(np.array([cx]), np.array([cy]))
    return replace(p, tx=float(ox[0]) - cx, ty=float(oy[0]) - cy, cx=cx, cy=cy)
