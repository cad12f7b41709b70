"""Synthetic benchmark: geometric and intensity distortion of a reference frame.

Every random draw comes from a Philox (counter-based) generator keyed by
``(seed, index, stream)``, so any item can be regenerated in isolation and
the whole dataset is reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import pgm
from .ffd import Lattice, TransformChain
from .image import as_image, as_mask, centroid, gaussian_filter, normalize, pixel_grid, warp, warp_mask
from .metrics import rmse
from .nonrigid import roi_rect, transported_rect
from .rigid import RigidParams

GEOMETRIC_STREAM = 0
INTENSITY_STREAM = 1
PHANTOM_STREAM = 2


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 20
    elastic_grid: int = 5
    elastic_max_disp: float = 4.0
    rigid_max_theta: float = 0.15
    rigid_max_trans: float = 8.0
    disk_count_range: tuple[int, int] = (3, 8)
    disk_radius_range: tuple[float, float] = (5.0, 15.0)
    noise_sigma: float = 0.15
    # margin around the mask box covered by the elastic lattice
    elastic_margin: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "disk_count_range", tuple(int(v) for v in self.disk_count_range))
        object.__setattr__(self, "disk_radius_range", tuple(float(v) for v in self.disk_radius_range))
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.elastic_grid < 1:
            raise ValueError("elastic_grid must be at least 1")
        for name in ("elastic_max_disp", "rigid_max_theta", "rigid_max_trans", "noise_sigma", "elastic_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("disk_count_range", "disk_radius_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= min <= max")

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disk_count_range"] = list(self.disk_count_range)
        d["disk_radius_range"] = list(self.disk_radius_range)
        return d


def item_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    """Independent Philox stream for one (seed, item, purpose) triple."""
    if not 0 <= index < 2**32 or not 0 <= stream < 2**32:
        raise ValueError("index and stream must fit in 32 bits")
    key = int(seed) | (int(index) << 64) | (int(stream) << 96)
    return np.random.Generator(np.random.Philox(key=key))


class GeometricSample(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    truth: TransformChain


def gen_geometric(ref, ref_mask, spec: SynthSpec, index: int) -> GeometricSample:
    """Warp ``ref`` and its mask by a random rigid map plus elastic FFD."""
    ref = as_image(ref)
    ref_mask = as_mask(ref_mask, require_foreground=True)
    rng = item_rng(spec.seed, index, GEOMETRIC_STREAM)
    theta = rng.uniform(-spec.rigid_max_theta, spec.rigid_max_theta)
    # translation uniform over the disk of radius rigid_max_trans
    t_angle = rng.uniform(0.0, 2.0 * math.pi)
    t_len = spec.rigid_max_trans * math.sqrt(rng.uniform(0.0, 1.0))
    cx, cy = centroid(ref_mask)
    rigid = RigidParams(theta, t_len * math.cos(t_angle), t_len * math.sin(t_angle), cx, cy)

    g = spec.elastic_grid
    phi = rng.uniform(-spec.elastic_max_disp, spec.elastic_max_disp, size=(g + 3, g + 3, 2))
    levels = []
    if spec.elastic_max_disp > 0:
        domain = transported_rect(roi_rect(ref_mask, spec.elastic_margin, ref.shape), rigid, ref.shape)
        levels.append(Lattice(domain, g, g, phi))
    truth = TransformChain(rigid, levels)
    return GeometricSample(warp(ref, truth), warp_mask(ref_mask, truth), truth)


def gen_intensity(s1, mask, spec: SynthSpec, index: int) -> np.ndarray:
    """Add Gaussian noise inside random disks within the mask, then rescale to [0, 1]."""
    s1 = as_image(s1)
    mask = as_mask(mask)
    rng = item_rng(spec.seed, index, INTENSITY_STREAM)
    out = s1.copy()
    lo, hi = spec.disk_count_range
    k = int(rng.integers(lo, hi + 1))
    my, mx = np.nonzero(mask)
    xs, ys = pixel_grid(s1.shape)
    xs = xs.reshape(s1.shape)
    ys = ys.reshape(s1.shape)
    for _ in range(k):
        if mx.size == 0:
            break
        pick = int(rng.integers(0, mx.size))
        radius = rng.uniform(*spec.disk_radius_range)
        disk = ((xs - mx[pick]) ** 2 + (ys - my[pick]) ** 2 <= radius * radius) & mask
        out[disk] += rng.normal(0.0, spec.noise_sigma, size=int(disk.sum())) if spec.noise_sigma > 0 else 0.0
    return normalize(out) if out.max() > out.min() else out


def clean_register_eval(ref, s1, recovered: TransformChain, mask) -> float:
    """RMSE over ``mask`` between ``ref`` and ``s1`` warped by the recovered transform."""
    clean, valid = warp(s1, recovered, return_valid=True)
    return rmse(ref, clean, mask, valid)


def baseline_rmse(ref, s1, mask) -> float:
    return rmse(ref, s1, mask)


def pouch_phantom(size: int = 256, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Textured oval on a dark background, standing in for a pouch frame."""
    rng = item_rng(seed, 0, PHANTOM_STREAM)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = size * 0.5 + 0.3, size * 0.5 - 0.2
    a, b, ang = 0.28 * size, 0.18 * size, 0.3
    u = (xs - cx) * math.cos(ang) + (ys - cy) * math.sin(ang)
    v = -(xs - cx) * math.sin(ang) + (ys - cy) * math.cos(ang)
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    texture = normalize(gaussian_filter(rng.random((size, size)), size / 64.0))
    background = normalize(gaussian_filter(rng.random((size, size)), size / 16.0))
    img = np.where(mask, 0.35 + 0.6 * texture, 0.03 + 0.07 * background)
    return normalize(gaussian_filter(img, 1.0)), mask


def _item_name(index: int) -> str:
    return f"{index:03d}"


def write_dataset(out_dir, ref, ref_mask, spec: SynthSpec) -> list[str]:
    """Write ``ref.pgm``, ``mask.pgm``, ``manifest.json`` and one directory per item.

    Each item directory holds ``s1.pgm``, ``s2.pgm``, ``truth.json`` and the
    warped ``mask.pgm``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref = as_image(ref)
    ref_mask = as_mask(ref_mask, require_foreground=True)
    pgm.write_image(out / "ref.pgm", ref)
    pgm.write_mask(out / "mask.pgm", ref_mask)
    names = []
    for i in range(spec.count):
        sample = gen_geometric(ref, ref_mask, spec, i)
        s2 = gen_intensity(sample.image, sample.mask, spec, i)
        d = out / _item_name(i)
        d.mkdir(exist_ok=True)
        pgm.write_image(d / "s1.pgm", sample.image)
        pgm.write_image(d / "s2.pgm", s2)
        pgm.write_mask(d / "mask.pgm", sample.mask)
        (d / "truth.json").write_text(sample.truth.to_json() + "\n")
        names.append(_item_name(i))
    manifest = {"format": "pouchreg.synth", "version": 1, "spec": spec.to_dict(), "items": names}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return names


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "pouchreg.synth":
        raise ValueError(f"{path}: not a pouchreg synthetic dataset manifest")
    return manifest
