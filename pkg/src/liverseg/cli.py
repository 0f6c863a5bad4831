"""Batch command-line surface: ``liverseg <command> [flags]``.

Commands cover the whole pipeline: phantom, preprocess, train, predict,
evaluate, gradcheck, shapecheck, overlay.  Every run is fully determined
by the config file plus the seed; flags override single config fields.
Exit status is 0 on success, nonzero with one diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .network import analyze_shapes, desk_spec, full_scale_spec, load_arch_spec
from .pipeline import (evaluate_pipeline, generate_dataset, predict_pipeline,
                       preprocess_summary, train_pipeline, write_overlays)
from .verify import GRAD_TOLERANCE, gradient_suite

__all__ = ["main", "build_parser"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="JSON run configuration; built-in desk defaults when omitted")
    p.add_argument("--seed", type=int, metavar="N",
                   help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liverseg",
        description="Cascaded liver and lesion segmentation on CT phantom volumes.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("phantom", help="generate the phantom train/val dataset")
    _add_common(p)

    p = sub.add_parser("preprocess",
                       help="window volumes and report the slice inventory")
    _add_common(p)

    p = sub.add_parser("train", help="train stage 1 plus the cascade, checkpoint")
    _add_common(p)
    p.add_argument("--epochs", type=int, metavar="N",
                   help="override stage-1 epoch count")
    p.add_argument("--stage2-epochs", type=int, metavar="N",
                   help="override cascade refinement epoch count")
    p.add_argument("--width-multiplier", type=float, metavar="X",
                   help="thin every layer to this fraction of reference width")

    p = sub.add_parser("predict", help="write predicted label masks")
    _add_common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--multiscale", action="store_true", default=None,
                   help="fuse predictions over the configured scale set (default)")
    g.add_argument("--single-scale", action="store_true",
                   help="bypass fusion; predict at native resolution only")
    p.add_argument("--split", default="val", choices=("train", "val"),
                   help="which volumes to predict (default val)")

    p = sub.add_parser("evaluate", help="score masks against truth labels")
    _add_common(p)
    p.add_argument("--split", default="val", choices=("train", "val"))

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the tensor engine")
    p.add_argument("--seeds", default="0,1,2", metavar="A,B,C",
                   help="comma-separated rng seeds (default 0,1,2)")

    p = sub.add_parser("shapecheck",
                       help="per-row output extents and parameter count")
    p.add_argument("--arch", metavar="FILE", help="architecture JSON file")
    p.add_argument("--full-scale", action="store_true",
                   help="use the full-width reference architecture")
    p.add_argument("--width-multiplier", type=float, metavar="X")
    p.add_argument("--input-size", type=int, metavar="N",
                   help="square input extent (default 504 full scale, 64 desk)")

    p = sub.add_parser("overlay", help="render masks over slices as PNGs")
    _add_common(p)
    p.add_argument("--volume", metavar="STEM",
                   help="single volume stem, e.g. vol000 (default: all)")
    p.add_argument("--split", default="val", choices=("train", "val"))

    return parser


def _config(args, **extra):
    overrides = {"seed": getattr(args, "seed", None)}
    overrides.update(extra)
    return load_config(getattr(args, "config", None), **overrides)


def _cmd_phantom(args) -> int:
    cfg = _config(args)
    manifest = generate_dataset(cfg)
    print(f"wrote {len(manifest['train'])} train and {len(manifest['val'])} "
          f"val volumes under {cfg.data_dir}")
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _config(args)
    summary = preprocess_summary(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "preprocess.json"
    dest.write_text(json.dumps(summary, indent=2) + "\n")
    for split, c in summary["splits"].items():
        print(f"{split}: {c['slices']} slices from {c['volumes']} volumes "
              f"({c['with_lesion']} with lesion, {c['organ_only']} organ only, "
              f"{c['empty']} empty)")
    print(f"selected {len(summary['selected'])} balanced training slices; "
          f"inventory at {dest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs, stage2_epochs=args.stage2_epochs,
                  width_multiplier=args.width_multiplier)
    train_pipeline(cfg)
    print(f"checkpoints written to {cfg.checkpoint_dir}")
    return 0


def _cmd_predict(args) -> int:
    cfg = _config(args)
    multiscale = not args.single_scale
    paths = predict_pipeline(cfg, multiscale=multiscale, split=args.split)
    mode = "multiscale" if multiscale else "single-scale"
    print(f"wrote {len(paths)} {mode} masks under {Path(cfg.output_dir) / 'masks'}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config(args)
    report = evaluate_pipeline(cfg, split=args.split)
    print(report.text_table())
    print(f"report written to {Path(cfg.output_dir) / 'report.json'}")
    return 0


def _cmd_gradcheck(args) -> int:
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        print(f"error: bad --seeds value {args.seeds!r}", file=sys.stderr)
        return 2
    if not seeds:
        print("error: --seeds names no seeds", file=sys.stderr)
        return 2
    results = gradient_suite(seeds)
    for r in results:
        flag = "ok  " if r.ok else "FAIL"
        print(f"{flag} {r.name:<28} seed={r.seed} rel_err={r.error:.3e}")
    worst = max(r.error for r in results)
    print(f"max relative error {worst:.3e} over {len(results)} checks "
          f"(tolerance {GRAD_TOLERANCE:.0e})")
    return 0 if all(r.ok for r in results) else 1


def _cmd_shapecheck(args) -> int:
    if args.arch and args.full_scale:
        print("error: --arch and --full-scale are mutually exclusive",
              file=sys.stderr)
        return 2
    if args.arch:
        spec = load_arch_spec(args.arch)
    elif args.full_scale:
        spec = full_scale_spec()
    else:
        spec = desk_spec()
    if args.width_multiplier is not None:
        spec = spec.with_width_multiplier(args.width_multiplier)
    n = args.input_size or (504 if args.full_scale else 64)
    report = analyze_shapes(spec, (n, n))
    print(f"input {n}x{n}, width multiplier {spec.width_multiplier}")
    for row in report.rows:
        print(f"row{row.index + 1:02d}  {row.out_h}x{row.out_w}"
              f"  channels {row.out_channels}")
    print(f"parameters: {report.parameter_count}")
    return 0


def _cmd_overlay(args) -> int:
    cfg = _config(args)
    stems = [args.volume] if args.volume else None
    paths = write_overlays(cfg, split=args.split, stems=stems)
    print(f"wrote {len(paths)} overlay images under "
          f"{Path(cfg.output_dir) / 'overlays'}")
    return 0


_HANDLERS = {
    "phantom": _cmd_phantom,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "shapecheck": _cmd_shapecheck,
    "overlay": _cmd_overlay,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
