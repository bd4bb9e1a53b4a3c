"""Command-line entry point.

Subcommands: stats, synth, train, eval, ablate, plot.  Exit code 0 on
success, 1 on argument/validation problems (unknown keys, missing files),
2 on runtime failures such as a training abort.  Outputs default to a
timestamped directory under $DUALSEG_OUT_ROOT (or ./runs); --out pins an
exact directory instead.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .core import ValidationError, load_manifest
from .data import GenerationError, dataset_stats, synth_generate
from .train import (
    CheckpointError,
    TrainingAbort,
    TrainingConfig,
    ablation_run,
    apply_overrides,
    evaluate_checkpoint,
    load_config,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _out_dir(args, kind: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get("DUALSEG_OUT_ROOT", "runs"))
        out = root / time.strftime(f"%Y%m%d_%H%M%S_{kind}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_parser() -> _Parser:
    parser = _Parser(prog="dualseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset imbalance and component-size statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))
    p.add_argument("--component-weighted", action="store_true",
                   help="weight size percentiles by component instead of pixel")

    p = sub.add_parser("synth", help="generate a synthetic lesion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--ratio", type=float, default=500.0)
    p.add_argument("--large-fraction", type=float, default=0.1)
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="run the optimization loop")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="score a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", default="0.2,0.35,0.5,0.65,0.8")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--fn-mode", default="literal", choices=("literal", "corrected-fn"))
    p.add_argument("--region-pooling", default="dataset", choices=("dataset", "per-image"))
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate", help="train and compare a config matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", default="loss", choices=("loss", "rate"))
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--eval-manifest", default=None,
                   help="manifest to score on (defaults to the training manifest)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("plot", help="render loss/alpha/PR figures")
    p.add_argument("--log", default=None, help="train_log.jsonl")
    p.add_argument("--report", default=None, help="metrics report.json")
    p.add_argument("--out", default=None)
    return parser


def _cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    stats = dataset_stats(manifest, connectivity=args.connectivity,
                          pixel_weighted=not args.component_weighted)
    print(json.dumps(stats.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_synth(args) -> int:
    manifest = synth_generate(
        args.out, args.count, extent=(args.height, args.width),
        imbalance_ratio=args.ratio, large_fraction=args.large_fraction,
        distractors=args.distractors, seed=args.seed, split=args.split)
    stats = dataset_stats(manifest)
    print(json.dumps({"manifest": str(Path(args.out) / f"{args.split}.tsv"),
                      "n_images": len(manifest), **stats.to_json()},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.overrides)
    out = _out_dir(args, "train")
    result = train(cfg, out, resume_from=args.resume)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _parse_sigmas(raw: str) -> list[float]:
    try:
        sigmas = [float(s) for s in raw.split(",") if s.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad sigma list {raw!r}: {exc}") from exc
    if not sigmas:
        raise ValidationError("sigma list is empty")
    return sigmas


def _cmd_eval(args) -> int:
    out = _out_dir(args, "eval")
    report = evaluate_checkpoint(
        args.checkpoint, args.manifest, sigmas=_parse_sigmas(args.sigma),
        threshold=args.threshold, region_pooling=args.region_pooling,
        fn_mode=args.fn_mode, connectivity=args.connectivity)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    summary = {k: v for k, v in report.items() if k not in ("per_image", "pr_curve")}
    summary["report"] = str(report_path)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _ablation_cells(base: TrainingConfig, sweep: str) -> list[tuple[str, TrainingConfig]]:
    cells = []
    if sweep == "loss":
        for name, mode in (("single_cbce", "single-cbce"), ("single_dice", "single-dice"),
                           ("dual_dsm", "dual-dsm")):
            cfg = TrainingConfig(**{**vars(base), "mode": mode})
            cells.append((name, cfg))
    else:
        for rate in (0.25, 0.5, 0.75):
            cfg = TrainingConfig(**{**vars(base), "mode": "dual-dsm", "sample_rate": rate,
                                    "reverse_class_frequency": False})
            cells.append((f"rate_{rate:g}", cfg))
        cfg = TrainingConfig(**{**vars(base), "mode": "dual-dsm",
                                "reverse_class_frequency": True})
        cells.append(("rate_reverse_class_frequency", cfg))
    return cells


def _cmd_ablate(args) -> int:
    base = load_config(args.config)
    apply_overrides(base, args.overrides)
    out = _out_dir(args, "ablate")
    eval_manifest = args.eval_manifest or base.train_manifest
    table = ablation_run(_ablation_cells(base, args.sweep), eval_manifest, out)
    print(json.dumps({"out_dir": str(out),
                      "cells": {k: v["F_pixel"] for k, v in table.items()}},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_plot(args) -> int:
    from . import plots

    if not args.log and not args.report:
        raise ValidationError("plot needs --log and/or --report")
    out = _out_dir(args, "plot")
    written = []
    if args.log:
        if not Path(args.log).is_file():
            raise ValidationError(f"log not found: {args.log}")
        written.append(str(plots.plot_loss_curves(args.log, out / "loss_curves.png")))
        written.append(str(plots.plot_alpha_schedule(args.log, out / "alpha_schedule.png")))
    if args.report:
        if not Path(args.report).is_file():
            raise ValidationError(f"report not found: {args.report}")
        written.append(str(plots.plot_pr_curve(args.report, out / "pr_curve.png")))
    print(json.dumps({"plots": written}, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "stats": _cmd_stats,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "plot": _cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, GenerationError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - boundary: report and signal failure
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
