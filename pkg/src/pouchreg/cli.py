"""Command line entry point: ``pouchreg <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pgm
from .boundary import refine_boundary
from .config import Config, load_config
from .image import EmptyMaskError
from .metrics import f1, hausdorff_masks, iou, mean_std
from .pipeline import (
    PipelineError,
    evaluate_dataset,
    register_dataset,
    register_movies,
    register_sequence,
    write_points,
    write_rows,
)
from .synth import SynthSpec, pouch_phantom, write_dataset

log = logging.getLogger("pouchreg")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON config (sections: rigid, nonrigid, refine, synth, pipeline)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent sequences/items")
    p.add_argument("--seed", type=int, help="override the synthetic RNG seed (unsigned 64-bit)")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="pouchreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common],
                       help="register a frame sequence (or a synthetic dataset) to its reference")
    p.add_argument("sequence", type=Path,
                   help="directory of .pgm frames, a directory of such sequences, or a synthetic dataset")
    p.add_argument("masks", type=Path, nargs="?", help="mask directory (same file names as the frames)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--refine", action="store_true", help="refine masks by boundary search before registering")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark dataset")
    p.add_argument("ref", type=Path)
    p.add_argument("mask", type=Path)
    p.add_argument("--spec", type=Path, help="JSON SynthSpec (overrides the config's synth section)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic pouch reference frame and mask")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="score registration results on a synthetic dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("results", type=Path)
    p.add_argument("--out", type=Path, help="report directory (default: the results directory)")

    p = sub.add_parser("refine", parents=[common], help="refine one mask's boundary")
    p.add_argument("image", type=Path)
    p.add_argument("mask", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("metrics", parents=[common], help="IoU, F1 and Hausdorff distance between mask sets")
    p.add_argument("predicted", type=Path, help="mask file or directory")
    p.add_argument("truth", type=Path, help="mask file or directory")
    p.add_argument("--out", type=Path, help="CSV destination (default: stdout)")
    return parser


def _config(args) -> Config:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, synth=dataclasses.replace(config.synth, seed=args.seed))
    return config


def _cmd_register(args, config: Config) -> int:
    seq = args.sequence
    if not seq.is_dir():
        raise PipelineError(f"{seq}: not a directory")
    if (seq / "manifest.json").exists():
        names = register_dataset(seq, args.out, config, args.jobs)
        print(f"registered {len(names)} items into {args.out}")
        return 0
    if args.masks is None:
        raise PipelineError(f"{seq}: a mask directory is required for frame sequences")
    if not any(seq.glob("*.pgm")) and any(p.is_dir() for p in seq.iterdir()):
        results = register_movies(seq, args.masks, args.out, config, args.refine or None, args.jobs)
        print(f"registered {len(results)} sequences into {args.out}")
        return 0
    result = register_sequence(seq, args.masks, args.out, config, args.refine or None)
    print(f"registered {len(result.frames)} frames of {result.movie} into {args.out}")
    return 0


def _cmd_synth(args, config: Config) -> int:
    spec = config.synth
    if args.spec is not None:
        try:
            spec = SynthSpec.from_dict(json.loads(args.spec.read_text()))
        except (OSError, TypeError, ValueError) as exc:
            raise PipelineError(f"{args.spec}: invalid synthetic spec ({exc})") from exc
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    ref = pgm.read_image(args.ref)
    mask = pgm.read_mask(args.mask)
    if not mask.any():
        raise PipelineError(f"{args.mask}: mask is empty")
    if mask.shape != ref.shape:
        raise PipelineError(f"{args.mask}: mask size differs from reference")
    names = write_dataset(args.out, ref, mask, spec)
    print(f"wrote {len(names)} items to {args.out}")
    return 0


def _cmd_phantom(args, config: Config) -> int:
    img, mask = pouch_phantom(args.size, config.synth.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    pgm.write_image(args.out / "ref.pgm", img)
    pgm.write_mask(args.out / "mask.pgm", mask)
    return 0


def _cmd_eval(args, config: Config) -> int:
    res = evaluate_dataset(args.dataset, args.results, args.out)
    mu, sd = mean_std(res.rmse)
    bmu, bsd = mean_std(res.baseline)
    print(f"{'movie':<12}{'RMSE':>20}{'baseline RMSE':>24}")
    print(f"{res.movie:<12}{mu:>11.4f} +/- {sd:.4f}{bmu:>15.4f} +/- {bsd:.4f}")
    return 0


def _cmd_refine(args, config: Config) -> int:
    img = pgm.read_image(args.image)
    mask = pgm.read_mask(args.mask)
    if not mask.any():
        raise PipelineError(f"{args.mask}: mask is empty")
    result = refine_boundary(img, mask, config.refine)
    args.out.mkdir(parents=True, exist_ok=True)
    pgm.write_mask(args.out / "refined_mask.pgm", result.mask)
    write_points(args.out / "polygon.csv", result.polygon, index_name="theta_index")
    if result.clipped:
        print("warning: search band was clipped at the image border", file=sys.stderr)
    return 0


def _mask_pairs(predicted: Path, truth: Path):
    if predicted.is_file() and truth.is_file():
        return [(predicted.name, predicted, truth)]
    if not (predicted.is_dir() and truth.is_dir()):
        raise PipelineError("predicted and truth must both be files or both be directories")
    pairs = []
    for p in sorted(predicted.glob("*.pgm")):
        t = truth / p.name
        if not t.exists():
            raise PipelineError(f"{t}: missing truth mask for {p.name}")
        pairs.append((p.name, p, t))
    if not pairs:
        raise PipelineError(f"{predicted}: no .pgm masks found")
    return pairs


def _cmd_metrics(args, config: Config) -> int:
    rows = []
    per_metric: dict[str, list[float]] = {"iou": [], "f1": [], "hd": []}
    for name, p, t in _mask_pairs(args.predicted, args.truth):
        a, b = pgm.read_mask(p), pgm.read_mask(t)
        if a.shape != b.shape:
            raise PipelineError(f"{p}: mask size differs from {t}")
        values = {"iou": iou(a, b), "f1": f1(a, b)}
        if a.any() and b.any():
            values["hd"] = hausdorff_masks(a, b)
        for key, v in values.items():
            rows.append(("masks", name, key, v))
            per_metric[key].append(v)
    for key, vals in per_metric.items():
        if vals:
            mu, sd = mean_std(vals)
            rows.append(("masks", "mean", key, mu))
            rows.append(("masks", "std", key, sd))
    if args.out is not None:
        write_rows(args.out, ["movie", "frame", "metric", "value"], rows)
    else:
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


COMMANDS = {
    "register": _cmd_register,
    "synth": _cmd_synth,
    "phantom": _cmd_phantom,
    "eval": _cmd_eval,
    "refine": _cmd_refine,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        return COMMANDS[args.command](args, config)
    except (PipelineError, EmptyMaskError, pgm.PGMError, OSError, ValueError) as exc:
        print(f"pouchreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
