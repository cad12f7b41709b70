import numpy as np
import pytest

from pouchreg.image import gaussian_filter


def ellipse_mask(shape, cx, cy, a, b, angle=0.0):
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
    v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def smooth_image(rng, shape, sigma=3.0):
    img = gaussian_filter(rng.random(shape), sigma)
    img -= img.min()
    return img / img.max()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ellipse_case(shape=(96, 96), a=26.0, b=15.0, angle=0.3):
    """Reference ellipse mask and its centroid."""
    from pouchreg.image import centroid

    mask = ellipse_mask(shape, shape[1] / 2 - 0.5, shape[0] / 2 - 0.5, a, b, angle)
    return mask, centroid(mask)


def gradient_instance(seed, size=32):
    """Two independent smooth images and a random lattice with |phi| <= 1 px."""
    from pouchreg.ffd import Lattice, RoiRect

    rng = np.random.default_rng(seed)
    ref = smooth_image(rng, (size, size), 2.0)
    src = smooth_image(rng, (size, size), 2.0)
    lat = Lattice(RoiRect(4.0, size - 4.0, 4.0, size - 4.0), 3, 3, rng.uniform(-1, 1, (6, 6, 2)))
    return ref, src, lat


def max_relative_error(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def disk_case(size=64, radius=20.0):
    """Sharp-edged bright disk and its exact mask."""
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    mask = np.hypot(xs - c, ys - c) <= radius
    return mask.astype(float), mask


def tree_bytes(root):
    """Relative path -> file bytes for every file below ``root``."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_rotation_sequence(seq_dir, mask_dir, img, mask, degrees):
    """Frames k = reference rotated about the mask centroid; recovered angle is +degrees[k]."""
    import math
    from pathlib import Path

    from pouchreg import pgm
    from pouchreg.image import centroid, warp, warp_mask
    from pouchreg.rigid import RigidParams

    cx, cy = centroid(mask)
    Path(seq_dir).mkdir(parents=True, exist_ok=True)
    if mask_dir is not None:
        Path(mask_dir).mkdir(parents=True, exist_ok=True)
    for k, deg in enumerate(degrees):
        p = RigidParams(-math.radians(deg), 0.0, 0.0, cx, cy)
        pgm.write_image(Path(seq_dir) / f"f{k:03d}.pgm", warp(img, p))
        if mask_dir is not None:
            pgm.write_mask(Path(mask_dir) / f"f{k:03d}.pgm", warp_mask(mask, p))
