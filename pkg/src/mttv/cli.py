"""Command-line surface: build-data, pretrain, evaluate, analyze-options, plot.

Exit codes: 0 on success, 2 on configuration validation failures, 3 on
numeric failures (non-finite loss or threshold collapse), 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, save_config, toy_preset
from .data import ClassCountProfile, DistributionKind, write_manifest
from .plots import PLOT_KINDS, plot
from .training import NumericsError, analyze_options, evaluate_checkpoint, load_datasets, pretrain


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else toy_preset()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        if config.data.source == "synthetic":
            overrides["data"] = dataclasses.replace(
                config.data, synthetic=dataclasses.replace(config.data.synthetic, seed=args.seed)
            )
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    return dataclasses.replace(config, **overrides) if overrides else config


def _cmd_build_data(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, eval_set = load_datasets(config)
    counts = tuple(int(c) for c in train.class_counts())
    kind = (
        DistributionKind.UNIFORM
        if min(counts) == max(counts)
        else DistributionKind.EXPONENTIAL
    )
    ratio = config.data.synthetic.r if config.data.source == "synthetic" else config.data.lt_r
    profile = ClassCountProfile(len(counts), counts, ratio, kind)
    write_manifest(out / "manifest.json", train, profile)
    save_config(config, out / "config.json")
    print(
        f"built {config.data.source} training set: {len(train)} samples over "
        f"{len(counts)} classes (head {counts[0]}, tail {counts[-1]}), "
        f"eval set {len(eval_set)} samples -> {out / 'manifest.json'}"
    )
    return 0


def _cmd_pretrain(args) -> int:
    config = _resolve_config(args)
    result = pretrain(config, args.out, resume=args.resume)
    final_acc = result.final_report.overall_acc if result.final_report else float("nan")
    print(
        f"pretraining done: final loss {result.final_loss:.4f}, KNN accuracy "
        f"{final_acc:.4f}\ncheckpoint: {result.checkpoint_path}\nmetrics: {result.metrics_path}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"missing checkpoint {checkpoint}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"report_{args.mode}.json"
    report = evaluate_checkpoint(checkpoint, args.mode, report_path)
    print(json.dumps({"mode": args.mode, "report": report.to_dict()}, indent=2, sort_keys=True))
    return 0


def _cmd_analyze_options(args) -> int:
    config = _resolve_config(args)
    comparison = analyze_options(config, args.out)
    for name, entry in comparison["variants"].items():
        acc = entry["report"]["overall_acc"] if entry["report"] else float("nan")
        ratios = entry["info_ratios"]
        ratio_text = (
            f" anchor ratios ({ratios['anchor_ratios'][0]:.2f}, {ratios['anchor_ratios'][1]:.2f})"
            if ratios
            else ""
        )
        print(f"{name}: KNN {acc:.4f}{ratio_text}")
    print(f"comparison written to {Path(args.out) / 'comparison.json'}")
    return 0


def _cmd_plot(args) -> int:
    out = plot(args.input, args.kind, args.out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mttv", description="Fused-pair contrastive pretraining for long-tailed data"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, resume: bool = False) -> None:
        p.add_argument("--config", type=Path, default=None, help="run config JSON (default: toy preset)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--deterministic", action="store_true", help="force single-threaded determinism")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if resume:
            p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    add_common(sub.add_parser("build-data", help="materialize a dataset manifest"))
    add_common(sub.add_parser("pretrain", help="run the pretraining loop"), resume=True)

    p_eval = sub.add_parser("evaluate", help="probe a checkpoint")
    p_eval.add_argument("mode", choices=("knn", "linear"))
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--out", type=Path, required=True)

    add_common(sub.add_parser("analyze-options", help="compare pairing options and view ablations"))

    p_plot = sub.add_parser("plot", help="render a figure from a metrics log or comparison file")
    p_plot.add_argument("--input", type=Path, required=True)
    p_plot.add_argument("--kind", choices=PLOT_KINDS, required=True)
    p_plot.add_argument("--out", type=Path, required=True)

    return parser


_COMMANDS = {
    "build-data": _cmd_build_data,
    "pretrain": _cmd_pretrain,
    "evaluate": _cmd_evaluate,
    "analyze-options": _cmd_analyze_options,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
