"""Uniform cubic B-spline free-form deformation and transform chains."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import lsqr

from .rigid import RigidParams

FORMAT = "pouchreg.transform"
VERSION = 1


def basis(i: int, t):
    """Uniform cubic B-spline basis ``B_i(t)`` for ``t`` in [0, 1)."""
    t = np.asarray(t, dtype=np.float64) if not isinstance(t, float) else t
    if i == 0:
        return (1.0 - t) ** 3 / 6.0
    if i == 1:
        return (3.0 * t**3 - 6.0 * t**2 + 4.0) / 6.0
    if i == 2:
        return (-3.0 * t**3 + 3.0 * t**2 + 3.0 * t + 1.0) / 6.0
    if i == 3:
        return t**3 / 6.0
    raise ValueError(f"basis index must be in 0..3, got {i}")


def _basis_all(t: np.ndarray) -> np.ndarray:
    return np.stack([basis(i, t) for i in range(4)])


@dataclass(frozen=True)
class RoiRect:
    """Half-open rectangle ``x_left <= x < x_right``, ``y_left <= y < y_right``."""

    x_left: float
    x_right: float
    y_left: float
    y_right: float

    def __post_init__(self):
        if not (self.x_left < self.x_right and self.y_left < self.y_right):
            raise ValueError(f"degenerate ROI rectangle {self}")

    @property
    def width(self) -> float:
        return self.x_right - self.x_left

    @property
    def height(self) -> float:
        return self.y_right - self.y_left

    def contains(self, xs, ys) -> np.ndarray:
        return (xs >= self.x_left) & (xs < self.x_right) & (ys >= self.y_left) & (ys < self.y_right)

    def to_dict(self) -> dict:
        return {"x_left": self.x_left, "x_right": self.x_right,
                "y_left": self.y_left, "y_right": self.y_right}

    @classmethod
    def from_dict(cls, d: dict) -> RoiRect:
        return cls(float(d["x_left"]), float(d["x_right"]), float(d["y_left"]), float(d["y_right"]))


@dataclass
class Lattice:
    """One FFD level: ``(n+3) x (m+3)`` control displacements over ``domain``.

    ``displacements[j, i]`` is the ``(dx, dy)`` of control point ``(i, j)``,
    with ``i`` running along x. Control point ``i`` sits at lattice coordinate
    ``u = i``, and the domain maps onto ``u`` in ``[1, m + 1)``.
    """

    domain: RoiRect
    m: int
    n: int
    displacements: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("lattice needs at least one cell per axis")
        shape = (self.n + 3, self.m + 3, 2)
        if self.displacements is None:
            self.displacements = np.zeros(shape)
        else:
            self.displacements = np.asarray(self.displacements, dtype=np.float64)
            if self.displacements.shape != shape:
                raise ValueError(f"displacements must have shape {shape}, got {self.displacements.shape}")
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("non-finite control displacement")

    @classmethod
    def zeros(cls, domain: RoiRect, m: int, n: int) -> Lattice:
        return cls(domain, m, n)

    @property
    def shape(self) -> tuple[int, int]:
        """Control grid shape as (rows, cols) = (n + 3, m + 3)."""
        return self.n + 3, self.m + 3

    @property
    def size(self) -> int:
        return (self.n + 3) * (self.m + 3)

    def copy(self) -> Lattice:
        return Lattice(self.domain, self.m, self.n, self.displacements.copy())

    def to_lattice_units(self, xs, ys):
        d = self.domain
        u = (np.asarray(xs, dtype=np.float64) - d.x_left) * (self.m / d.width) + 1.0
        v = (np.asarray(ys, dtype=np.float64) - d.y_left) * (self.n / d.height) + 1.0
        return u, v

    def _cells(self, xs, ys):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        inside = self.domain.contains(xs, ys)
        u, v = self.to_lattice_units(xs[inside], ys[inside])
        # clipping guards float round-off right at x_right; the fraction is
        # taken relative to the clipped cell so the field stays continuous
        k = np.clip(np.floor(u).astype(np.intp) - 1, 0, self.m - 1)
        l = np.clip(np.floor(v).astype(np.intp) - 1, 0, self.n - 1)
        return inside, k, l, u - (k + 1), v - (l + 1)

    def displace(self, xs, ys):
        """Displacement field at the given points: ``(dx, dy, inside)``.

        Points outside the domain get zero displacement and ``inside`` False.
        """
        xs = np.asarray(xs, dtype=np.float64)
        inside, k, l, s, t = self._cells(xs, ys)
        bs = _basis_all(s)
        bt = _basis_all(t)
        acc = np.zeros((k.size, 2))
        phi = self.displacements
        for j in range(4):
            for i in range(4):
                w = bs[i] * bt[j]
                acc += w[:, None] * phi[l + j, k + i]
        dx = np.zeros(xs.shape)
        dy = np.zeros(xs.shape)
        dx[inside] = acc[:, 0]
        dy[inside] = acc[:, 1]
        return dx, dy, inside

    def weight_matrix(self, xs, ys) -> sparse.csr_matrix:
        """Sparse ``(P, size)`` matrix ``W`` with ``displace = W @ phi.reshape(-1, 2)``."""
        xs = np.asarray(xs, dtype=np.float64)
        inside, k, l, s, t = self._cells(xs, ys)
        rows_in = np.nonzero(inside)[0]
        bs = _basis_all(s)
        bt = _basis_all(t)
        cols = self.m + 3
        rows, idx, vals = [], [], []
        for j in range(4):
            for i in range(4):
                rows.append(rows_in)
                idx.append((l + j) * cols + (k + i))
                vals.append(bs[i] * bt[j])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(idx))),
            shape=(xs.size, self.size),
        )

    def apply(self, xs, ys):
        dx, dy, _ = self.displace(xs, ys)
        return np.asarray(xs, dtype=np.float64) + dx, np.asarray(ys, dtype=np.float64) + dy

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "m": self.m,
            "n": self.n,
            "displacements": self.displacements.reshape(-1, 2).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Lattice:
        m, n = int(d["m"]), int(d["n"])
        phi = np.asarray(d["displacements"], dtype=np.float64).reshape(n + 3, m + 3, 2)
        return cls(RoiRect.from_dict(d["domain"]), m, n, phi)


def ffd_displace(lat: Lattice, x: float, y: float) -> tuple[float, float, bool]:
    dx, dy, inside = lat.displace(np.array([x]), np.array([y]))
    return float(dx[0]), float(dy[0]), bool(inside[0])


def refine_level(lat: Lattice) -> Lattice:
    """Fresh zero lattice over the same domain with twice the cells per axis."""
    return Lattice.zeros(lat.domain, 2 * lat.m, 2 * lat.n)


@dataclass
class TransformChain:
    """Rigid map followed by FFD levels, evaluated in that order.

    As a backward map it sends output (reference) pixels to the source
    positions they are sampled from.
    """

    rigid: RigidParams = field(default_factory=RigidParams)
    levels: list[Lattice] = field(default_factory=list)

    def __post_init__(self):
        if self.rigid is None:
            self.rigid = RigidParams()
        self.levels = list(self.levels)

    @property
    def g(self) -> int:
        return len(self.levels)

    def apply(self, xs, ys):
        xs, ys = self.rigid.apply(xs, ys)
        for lat in self.levels:
            xs, ys = lat.apply(xs, ys)
        return xs, ys

    def prefix(self, count: int) -> TransformChain:
        """The rigid part plus the first ``count`` levels."""
        return TransformChain(self.rigid, list(self.levels[:count]))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "rigid": self.rigid.to_dict(),
            "levels": [lat.to_dict() for lat in self.levels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TransformChain:
        if d.get("format") != FORMAT or int(d.get("version", -1)) != VERSION:
            raise ValueError("not a version-1 pouchreg transform document")
        return cls(RigidParams.from_dict(d["rigid"]), [Lattice.from_dict(x) for x in d["levels"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> TransformChain:
        return cls.from_dict(json.loads(text))


def compose_apply(chain: TransformChain, p) -> tuple[float, float]:
    x, y = chain.apply(np.array([p[0]], dtype=np.float64), np.array([p[1]], dtype=np.float64))
    return float(x[0]), float(y[0])


def fit_lattice(domain: RoiRect, m: int, n: int, xs, ys, dx, dy, damping: float = 1e-6) -> Lattice:
    """Least-squares lattice whose displacement best matches ``(dx, dy)`` at the points."""
    lat = Lattice.zeros(domain, m, n)
    W = lat.weight_matrix(xs, ys)
    phi = np.column_stack([
        lsqr(W, np.asarray(target, dtype=np.float64), damp=damping, atol=1e-14, btol=1e-14,
             iter_lim=20 * W.shape[1])[0]
        for target in (dx, dy)
    ])
    lat.displacements = phi.reshape(n + 3, m + 3, 2)
    return lat


def _invert_points(levels: list[Lattice], ys_x, ys_y, iters: int = 100):
    """Solve ``L(x) = y`` for the composed levels by fixed-point iteration."""
    chain = TransformChain(RigidParams(), levels)
    x, y = ys_x.copy(), ys_y.copy()
    for _ in range(iters):
        fx, fy = chain.apply(x, y)
        ex, ey = fx - ys_x, fy - ys_y
        x, y = x - ex, y - ey
        if max(np.abs(ex).max(initial=0.0), np.abs(ey).max(initial=0.0)) < 1e-10:
            break
    return x, y


def invert_chain(chain: TransformChain, shape, refine: int = 2) -> TransformChain:
    """Numerical inverse of a chain over a raster of the given ``(h, w)`` shape.

    The rigid part inverts exactly. For ``T = L o R`` the inverse
    ``R^-1 o L^-1`` is rewritten as ``M o R^-1`` with
    ``M = R^-1 o L^-1 o R``; ``M`` is found pointwise by fixed-point
    iteration and fitted with one lattice ``refine`` times finer than the
    finest level. Exact when there are no levels.
    """
    inv_rigid = chain.rigid.inverse()
    if not chain.levels:
        return TransformChain(inv_rigid, [])
    # points z whose R(z) may fall in a level domain
    corners = []
    for lat in chain.levels:
        d = lat.domain
        cx = np.array([d.x_left, d.x_right, d.x_right, d.x_left])
        cy = np.array([d.y_left, d.y_left, d.y_right, d.y_right])
        corners.append(inv_rigid.apply(cx, cy))
    allx = np.concatenate([c[0] for c in corners])
    ally = np.concatenate([c[1] for c in corners])
    reach = max(float(np.abs(lat.displacements).max()) for lat in chain.levels)
    pad = math.ceil(reach) + 1.0
    domain = RoiRect(allx.min() - pad, allx.max() + pad, ally.min() - pad, ally.max() + pad)
    m = max(lat.m for lat in chain.levels) * refine
    n = max(lat.n for lat in chain.levels) * refine
    h, w = shape
    step = 0.5
    gx = np.arange(max(domain.x_left, -pad), min(domain.x_right, w + pad), step)
    gy = np.arange(max(domain.y_left, -pad), min(domain.y_right, h + pad), step)
    zx, zy = (a.ravel() for a in np.meshgrid(gx, gy))
    keep = domain.contains(zx, zy)
    zx, zy = zx[keep], zy[keep]
    rx, ry = chain.rigid.apply(zx, zy)
    lx, ly = _invert_points(chain.levels, rx, ry)
    mx, my = inv_rigid.apply(lx, ly)
    lat = fit_lattice(domain, m, n, zx, zy, mx - zx, my - zy)
    return TransformChain(inv_rigid, [lat])
