"""Sequence and benchmark orchestration behind the command line."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pgm
from .boundary import RefineConfig, refine_boundary
from .config import Config
from .ffd import Lattice, TransformChain
from .image import EmptyMaskError, boundary_pixels, warp, warp_mask
from .metrics import hausdorff_masks, mean_std
from .nonrigid import LevelLog, register_nonrigid
from .rigid import RigidParams, register_rigid
from .synth import baseline_rmse, clean_register_eval, read_manifest

log = logging.getLogger(__name__)

STATE_FILE = "state.json"


class PipelineError(RuntimeError):
    """A failure tied to a specific input file, frame or stage."""


def _fmt(v: float) -> str:
    return repr(float(v))


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_log(path: Path, trace: LevelLog) -> None:
    write_rows(path, ["level", "iter", "energy", "step"], trace.rows)


def write_points(path: Path, points: np.ndarray, index_name: str = "index") -> None:
    write_rows(path, [index_name, "x", "y"], [(i, float(x), float(y)) for i, (x, y) in enumerate(points)])


def overlay(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy of ``img`` with the mask boundary drawn at full intensity."""
    out = np.array(img, dtype=np.float64)
    pts = boundary_pixels(mask).astype(np.intp)
    out[pts[:, 1], pts[:, 0]] = 1.0
    return out


def _read_image(path: Path) -> np.ndarray:
    try:
        return pgm.read_image(path)
    except (OSError, ValueError) as exc:
        raise PipelineError(f"{path}: cannot read image ({exc})") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        mask = pgm.read_mask(path)
    except (OSError, ValueError) as exc:
        raise PipelineError(f"{path}: cannot read mask ({exc})") from exc
    if not mask.any():
        raise PipelineError(f"{path}: mask is empty")
    return mask


# ---------------------------------------------------------------- sequences


@dataclass
class SequenceResult:
    movie: str
    frames: list[str] = field(default_factory=list)
    hd: dict = field(default_factory=dict)
    rigid: dict = field(default_factory=dict)


def _pair_masks(frames: list[Path], masks_dir: Path | None) -> tuple[dict, bool]:
    """Map frame names to mask paths; second value is True in frame-0-only mode."""
    if masks_dir is None or not masks_dir.is_dir():
        raise PipelineError(f"{masks_dir}: mask directory not found")
    masks = {p.name: p for p in sorted(masks_dir.glob("*.pgm"))}
    if frames[0].name not in masks:
        raise PipelineError(f"{masks_dir / frames[0].name}: missing reference mask")
    if len(masks) == 1:
        return masks, True
    for f in frames:
        if f.name not in masks:
            raise PipelineError(f"{masks_dir / f.name}: missing mask for frame {f.name}")
    extra = sorted(set(masks) - {f.name for f in frames})
    if extra:
        raise PipelineError(f"{masks_dir / extra[0]}: mask has no matching frame")
    return masks, False


def _load_state(out: Path, movie: str, frames: list[str]) -> dict:
    path = out / STATE_FILE
    if not path.exists():
        return {"movie": movie, "completed": []}
    state = json.loads(path.read_text())
    done = [c["frame"] for c in state.get("completed", [])]
    if state.get("movie") != movie or done != frames[1 : 1 + len(done)]:
        raise PipelineError(f"{path}: resume state does not match this sequence")
    return state


def register_sequence(seq_dir, masks_dir, out_dir, config: Config | None = None,
                      refine: bool | None = None) -> SequenceResult:
    """Register every frame of a sequence to its first frame.

    Rigid alignment of frame k is warm-started from frame k-1's optimum.
    Progress is checkpointed in ``out_dir/state.json`` so an interrupted run
    resumes after the last completed frame.
    """
    config = config or Config()
    seq_dir = Path(seq_dir)
    out = Path(out_dir)
    frames = sorted(seq_dir.glob("*.pgm"))
    if len(frames) < 2:
        raise PipelineError(f"{seq_dir}: need at least two .pgm frames")
    masks, ref_only = _pair_masks(frames, Path(masks_dir) if masks_dir is not None else None)
    if ref_only:
        log.warning("%s: only the first frame has a mask; rigid stage matches smoothed intensities", seq_dir)
    refine = config.pipeline.refine_masks if refine is None else refine
    movie = seq_dir.name
    names = [f.name for f in frames]
    for sub in ("transforms", "registered", "annotations", "overlays", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    ref = _read_image(frames[0])
    ref_mask = _read_mask(masks[frames[0].name])
    if ref_mask.shape != ref.shape:
        raise PipelineError(f"{masks[frames[0].name]}: mask size differs from frame")
    if refine:
        ref_mask = _refined(ref, ref_mask, config.refine, masks[frames[0].name])

    state = _load_state(out, movie, names)
    result = SequenceResult(movie)
    warm: RigidParams | None = None
    prev_levels: list[Lattice] | None = None
    for entry in state["completed"]:
        warm = RigidParams.from_dict(entry["rigid"])
        result.frames.append(entry["frame"])
        result.hd[entry["frame"]] = entry["hd"]
        result.rigid[entry["frame"]] = entry["rigid"]
        if config.pipeline.warm_start_nonrigid:
            stem = Path(entry["frame"]).stem
            prev_levels = TransformChain.from_json((out / "transforms" / f"{stem}.json").read_text()).levels

    for frame in frames[1 + len(state["completed"]) :]:
        stem = frame.stem
        src = _read_image(frame)
        if src.shape != ref.shape:
            raise PipelineError(f"{frame}: frame size {src.shape} differs from reference {ref.shape}")
        if ref_only:
            src_mask = None
        else:
            src_mask = _read_mask(masks[frame.name])
            if src_mask.shape != src.shape:
                raise PipelineError(f"{masks[frame.name]}: mask size differs from frame")
            if refine:
                src_mask = _refined(src, src_mask, config.refine, masks[frame.name])
        try:
            if src_mask is None:
                rigid = register_rigid(ref_mask, ref_mask, warm, config.rigid, images=(ref, src))
            else:
                rigid = register_rigid(ref_mask, src_mask, warm, config.rigid)
        except (ValueError, EmptyMaskError) as exc:
            raise PipelineError(f"{frame}: rigid stage failed ({exc})") from exc
        trace = LevelLog()
        try:
            chain = register_nonrigid(ref, src, ref_mask, rigid.params, config.nonrigid, trace,
                                      prev_levels if config.pipeline.warm_start_nonrigid else None)
        except ValueError as exc:
            raise PipelineError(f"{frame}: non-rigid stage failed ({exc})") from exc
        warm = rigid.params
        prev_levels = chain.levels

        registered = warp(src, chain)
        (out / "transforms" / f"{stem}.json").write_text(chain.to_json() + "\n")
        pgm.write_image(out / "registered" / f"{stem}.pgm", registered)
        write_log(out / "logs" / f"{stem}.csv", trace)
        if config.pipeline.write_overlays:
            pgm.write_image(out / "overlays" / f"{stem}.pgm", overlay(registered, ref_mask))
        hd = None
        if src_mask is not None:
            annotation = warp_mask(src_mask, chain)
            write_points(out / "annotations" / f"{stem}.csv", boundary_pixels(annotation))
            hd = hausdorff_masks(annotation, ref_mask) if annotation.any() else math.inf
        state["completed"].append({"frame": frame.name, "rigid": rigid.params.to_dict(), "hd": hd})
        (out / STATE_FILE).write_text(json.dumps(state, indent=1) + "\n")
        result.frames.append(frame.name)
        result.hd[frame.name] = hd
        result.rigid[frame.name] = rigid.params.to_dict()
        log.info("%s/%s: theta %.4f rad, HD %s", movie, frame.name, rigid.params.theta, hd)

    rows = []
    for name in result.frames:
        r = result.rigid[name]
        for key in ("theta_rad", "tx", "ty"):
            rows.append((movie, name, key, float(r[key])))
        if result.hd[name] is not None:
            rows.append((movie, name, "hd", float(result.hd[name])))
    write_rows(out / "metrics.csv", ["movie", "frame", "metric", "value"], rows)
    hds = [v for v in result.hd.values() if v is not None]
    if hds:
        mu, sd = mean_std(hds)
        write_rows(out / "summary.csv", ["movie", "metric", "mean", "std", "n"], [(movie, "hd", mu, sd, len(hds))])
    return result


def _refined(img, mask, cfg: RefineConfig, path) -> np.ndarray:
    try:
        return refine_boundary(img, mask, cfg).mask
    except (ValueError, EmptyMaskError) as exc:
        raise PipelineError(f"{path}: boundary refinement failed ({exc})") from exc


def _movie_job(args):
    seq, masks, out, config, refine = args
    return register_sequence(seq, masks, out, config, refine)


def register_movies(parent, masks_parent, out_dir, config: Config | None = None,
                    refine: bool | None = None, jobs: int = 1) -> list[SequenceResult]:
    """Register each sub-directory of ``parent`` as its own sequence."""
    parent = Path(parent)
    movies = sorted(p for p in parent.iterdir() if p.is_dir())
    tasks = [(m, Path(masks_parent) / m.name, Path(out_dir) / m.name, config, refine) for m in movies]
    return _run(tasks, _movie_job, jobs)


def _run(tasks, fn, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------- benchmark


def _dataset_job(args):
    dataset, name, out, config = args
    ref = _read_image(dataset / "ref.pgm")
    ref_mask = _read_mask(dataset / "mask.pgm")
    item = dataset / name
    src = _read_image(item / "s2.pgm")
    src_mask = _read_mask(item / "mask.pgm")
    try:
        rigid = register_rigid(ref_mask, src_mask, None, config.rigid)
        trace = LevelLog()
        chain = register_nonrigid(ref, src, ref_mask, rigid.params, config.nonrigid, trace)
    except (ValueError, EmptyMaskError) as exc:
        raise PipelineError(f"{item}: registration failed ({exc})") from exc
    dest = out / name
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "transform.json").write_text(chain.to_json() + "\n")
    pgm.write_image(dest / "registered.pgm", warp(src, chain))
    write_log(dest / "log.csv", trace)
    return name


def register_dataset(dataset_dir, out_dir, config: Config | None = None, jobs: int = 1) -> list[str]:
    """Register every item's distorted frame ``s2`` to the dataset reference."""
    config = config or Config()
    dataset = Path(dataset_dir)
    try:
        manifest = read_manifest(dataset)
    except (OSError, ValueError) as exc:
        raise PipelineError(f"{dataset / 'manifest.json'}: {exc}") from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(dataset, name, out, config) for name in manifest["items"]]
    return _run(tasks, _dataset_job, jobs)


@dataclass
class EvalResult:
    movie: str
    items: list[str]
    rmse: list[float]
    baseline: list[float]


def evaluate_dataset(dataset_dir, results_dir, out_dir=None) -> EvalResult:
    """Clean-registered RMSE per item plus the unregistered baseline.

    Writes ``eval_items.csv`` (movie, frame, metric, value) and
    ``eval_table.csv`` (per-movie mean and std) into ``out_dir``, which
    defaults to ``results_dir``.
    """
    dataset = Path(dataset_dir)
    results = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else results
    try:
        manifest = read_manifest(dataset)
    except (OSError, ValueError) as exc:
        raise PipelineError(f"{dataset / 'manifest.json'}: {exc}") from exc
    ref = _read_image(dataset / "ref.pgm")
    mask = _read_mask(dataset / "mask.pgm")
    movie = dataset.name
    res = EvalResult(movie, [], [], [])
    for name in manifest["items"]:
        path = results / name / "transform.json"
        if not path.exists():
            raise PipelineError(f"{path}: missing result for dataset item {name}")
        try:
            chain = TransformChain.from_json(path.read_text())
        except (ValueError, KeyError) as exc:
            raise PipelineError(f"{path}: unreadable transform ({exc})") from exc
        s1 = _read_image(dataset / name / "s1.pgm")
        res.items.append(name)
        res.rmse.append(clean_register_eval(ref, s1, chain, mask))
        res.baseline.append(baseline_rmse(ref, s1, mask))
    extra = sorted(p.name for p in results.iterdir() if p.is_dir() and p.name not in set(manifest["items"]))
    if extra:
        raise PipelineError(f"{results / extra[0]}: result has no matching dataset item")

    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, r, b in zip(res.items, res.rmse, res.baseline):
        rows.append((movie, name, "rmse", r))
        rows.append((movie, name, "baseline_rmse", b))
    write_rows(out / "eval_items.csv", ["movie", "frame", "metric", "value"], rows)
    mu, sd = mean_std(res.rmse)
    bmu, bsd = mean_std(res.baseline)
    write_rows(out / "eval_table.csv",
               ["movie", "rmse_mean", "rmse_std", "baseline_mean", "baseline_std", "n"],
               [(movie, mu, sd, bmu, bsd, len(res.items))])
    return res
