"""Raster primitives: sampling, filtering, differentiation, downsampling, warping.

Images are 2-D float64 numpy arrays indexed ``img[y, x]`` with intensities in
[0, 1]. Masks are 2-D boolean arrays of the same layout. Continuous pixel
coordinates put pixel ``(x, y)`` at its center, so integer coordinates hit
stored values exactly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage


class EmptyMaskError(ValueError):
    """Raised when a mask used as an ROI has no foreground pixel."""


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    return img


def as_mask(data, require_foreground: bool = False) -> np.ndarray:
    mask = np.asarray(data) != 0
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    if require_foreground and not mask.any():
        raise EmptyMaskError("mask has no foreground pixels")
    return mask


def normalize(img: np.ndarray) -> np.ndarray:
    """Affinely rescale so min -> 0 and max -> 1 (constant images map to 0)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def sample_bilinear(img: np.ndarray, xs, ys, with_gradient: bool = False):
    """Bilinear interpolation at continuous coordinates.

    Returns ``(values, valid)``, or ``(values, valid, gx, gy)`` when
    ``with_gradient`` is set. Queries outside ``[0, w-1] x [0, h-1]`` yield
    0.0 (and zero gradient) with ``valid`` False.
    """
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    # at the far border the upper neighbour has weight 0; clamp its index
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    values = np.where(valid, top + fy * (bottom - top), 0.0)
    if not with_gradient:
        return values, valid
    gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bottom - top
    return values, valid, np.where(valid, gx, 0.0), np.where(valid, gy, 0.0)


def _cubic_weights(t: np.ndarray):
    t2 = t * t
    t3 = t2 * t
    w = np.stack([(1.0 - t) ** 3, 3.0 * t3 - 6.0 * t2 + 4.0, -3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0, t3]) / 6.0
    dw = np.stack([-0.5 * (1.0 - t) ** 2, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2])
    return w, dw


class CubicSampler:
    """Interpolating cubic B-spline of an image (C2, mirror-extended).

    Agrees with the stored pixels at integer coordinates and has a continuous
    gradient, which the optimizer's line search and finite-difference checks
    rely on. Out-of-domain queries behave as in :func:`sample_bilinear`.
    """

    def __init__(self, img: np.ndarray):
        self.shape = img.shape
        self.img = np.asarray(img, dtype=np.float64)
        coeffs = ndimage.spline_filter(np.asarray(img, dtype=np.float64), order=3, mode="mirror")
        self.coeffs = np.pad(coeffs, 2, mode="reflect")

    def __call__(self, xs, ys, with_gradient: bool = False):
        h, w = self.shape
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        xc = np.where(valid, xs, 0.0)
        yc = np.where(valid, ys, 0.0)
        x0 = np.floor(xc).astype(np.intp)
        y0 = np.floor(yc).astype(np.intp)
        wx, dwx = _cubic_weights(xc - x0)
        wy, dwy = _cubic_weights(yc - y0)
        c = self.coeffs
        values = np.zeros(xs.shape)
        gx = np.zeros(xs.shape) if with_gradient else None
        gy = np.zeros(xs.shape) if with_gradient else None
        # taps x0-1 .. x0+2 sit at padded index x0+1 .. x0+4
        for j in range(4):
            row = y0 + 1 + j
            inner = np.zeros(xs.shape)
            dinner = np.zeros(xs.shape) if with_gradient else None
            for i in range(4):
                cij = c[row, x0 + 1 + i]
                inner += wx[i] * cij
                if with_gradient:
                    dinner += dwx[i] * cij
            values += wy[j] * inner
            if with_gradient:
                gx += wy[j] * dinner
                gy += dwy[j] * inner
        # exact at pixel centers (the prefilter leaves ~1e-16 round-off there)
        node = valid & (xc == x0) & (yc == y0)
        values[node] = self.img[y0[node], x0[node]]
        values = np.where(valid, values, 0.0)
        if not with_gradient:
            return values, valid
        return values, valid, np.where(valid, gx, 0.0), np.where(valid, gy, 0.0)


def bilinear_sample(img: np.ndarray, x: float, y: float) -> tuple[float, bool]:
    """Scalar convenience wrapper around :func:`sample_bilinear`."""
    v, ok = sample_bilinear(img, np.array([x]), np.array([y]))
    return float(v[0]), bool(ok[0])


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_filter(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at ceil(3 sigma), edge clamped."""
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(img, dtype=np.float64), kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"gradient needs at least a 3x3 image, got {img.shape}")
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def downsample_half(img: np.ndarray) -> np.ndarray:
    """2x2 block mean; partial blocks at odd borders average what exists."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"downsampling needs at least 2x2 pixels, got {img.shape}")
    hh, ww = -(-h // 2), -(-w // 2)
    sums = np.zeros((hh, ww))
    counts = np.zeros((hh, ww))
    for dy in (0, 1):
        for dx in (0, 1):
            block = img[dy::2, dx::2]
            sums[: block.shape[0], : block.shape[1]] += block
            counts[: block.shape[0], : block.shape[1]] += 1
    return sums / counts


def pixel_grid(shape) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (xs, ys) coordinates of every pixel center, row-major."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def warp(img: np.ndarray, transform, shape=None, return_valid: bool = False,
         order: int = 1):
    """Backward warp: ``out[p] = img(T(p))`` with zero fill outside ``img``.

    ``transform`` is anything exposing ``apply(xs, ys) -> (xs, ys)``, usually
    a :class:`pouchreg.ffd.TransformChain`. ``shape`` defaults to the input
    shape. ``order`` 1 is bilinear, 3 the cubic B-spline of
    :class:`CubicSampler`.
    """
    img = np.asarray(img, dtype=np.float64)
    shape = img.shape if shape is None else tuple(shape)
    xs, ys = pixel_grid(shape)
    qx, qy = transform.apply(xs, ys)
    if order == 1:
        values, valid = sample_bilinear(img, qx, qy)
    elif order == 3:
        values, valid = CubicSampler(img)(qx, qy)
    else:
        raise ValueError(f"unsupported interpolation order {order}")
    out = values.reshape(shape)
    if return_valid:
        return out, valid.reshape(shape)
    return out


def warp_mask(mask: np.ndarray, transform, shape=None) -> np.ndarray:
    """Warp a binary mask (bilinear, thresholded at 0.5)."""
    return warp(np.asarray(mask, dtype=np.float64), transform, shape) >= 0.5


def centroid(mask: np.ndarray) -> tuple[float, float]:
    mask = as_mask(mask, require_foreground=True)
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def bounding_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds ``(x_min, x_max, y_min, y_max)`` of the foreground."""
    mask = as_mask(mask, require_foreground=True)
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(xs.max()), int(ys.min()), int(ys.max())


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(N, 2) array of (x, y) for foreground pixels with a background 4-neighbour.

    Pixels outside the raster count as background.
    """
    mask = as_mask(mask)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    ys, xs = np.nonzero(mask & ~interior)
    return np.column_stack([xs, ys]).astype(np.float64)
