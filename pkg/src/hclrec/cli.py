"""Command line entry point: preprocess, train, eval, ablate, sweep."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .corpus import FORMATS, ConfigError, DataError, preprocess, read_split, write_split
from .evaluation import evaluate
from .experiments import (
    ExperimentSpec,
    UsageError,
    apply_flags,
    load_grid_file,
    parse_variants,
    run_ablation,
    run_sweep,
    run_training,
)
from .model import load_checkpoint
from .synthetic import bundled_path
from .train import NumericError, TrainConfig, load_config_file

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("hclrec")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hclrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="k-core filter and split a raw log")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out", required=True)

    def add_training_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--data", required=True,
                       help="preprocessed directory, or 'synthetic' for the bundled toy set")
        p.add_argument("--config", help="JSON or key=value config file")
        p.add_argument("--override", type=_kv, action="extend", nargs="+", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default="runs/latest")

    p = sub.add_parser("train", help="train one model")
    add_training_args(p)
    p.add_argument("--variant", default="", help="ablation flags joined by '+'")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cohort-threshold", type=int)
    p.add_argument("--stage", choices=("test", "valid"), default="test")
    p.add_argument("--no-blocks", action="store_true", help="load without block parameters")
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train ablation variants side by side")
    add_training_args(p)
    p.add_argument("--variants", default="full,no_blocks,flat_aug,no_warmup,coserec_mode")
    p.add_argument("--extra-data", action="append", default=[], metavar="NAME=DIR",
                   type=_kv, help="additional datasets for the table")

    p = sub.add_parser("sweep", help="grid sweep over hyperparameters")
    add_training_args(p)
    p.add_argument("--grid", required=True, help="JSON grid file")
    p.add_argument("--variants", default="", help=argparse.SUPPRESS)
    return parser


def load_data(spec: str, max_len: int):
    if spec == "synthetic":
        split, _ = preprocess(bundled_path(), "tsv", k=5, max_len=max_len)
        return split
    return read_split(spec, max_len)


def resolve_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        config = config.override(load_config_file(args.config))
    if args.override:
        config = config.override(dict(args.override))
    env_seed = os.environ.get("HCLREC_SEED")
    if env_seed:
        config = config.override({"seed": env_seed})
    return config


def cmd_preprocess(args) -> int:
    split, vocab = preprocess(args.input, args.format, args.k, args.max_len)
    stats = write_split(split, vocab, args.out)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    flags = parse_variants(args.variant)[0] if args.variant else ()
    ExperimentSpec("train", args.data, variants=[flags] if flags else [])
    config = apply_flags(config, flags)
    split = load_data(args.data, config.max_len)
    _, metrics = run_training(config, split, args.out)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint, with_blocks=not args.no_blocks)
    split = load_data(args.data, header["max_len"])
    result = evaluate(model, split, cohort_threshold=args.cohort_threshold, stage=args.stage)
    reports = result if isinstance(result, dict) else {"all": result}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, report in reports.items():
            report.write(out / f"report_{name}.json", out / f"ranks_{name}.csv")
    print(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    variants = parse_variants(args.variants)
    ExperimentSpec("ablate", args.data, variants=variants)
    datasets = {Path(args.data).name or "data": load_data(args.data, config.max_len)}
    for name, path in args.extra_data:
        datasets[name] = load_data(path, config.max_len)
    rows = run_ablation(config, datasets, variants, args.out)
    print((Path(args.out) / "ablation.md").read_text())
    return EXIT_OK if rows else EXIT_USAGE


def cmd_sweep(args) -> int:
    if args.variants:
        raise UsageError("ablation variants cannot be combined with sweep")
    config = resolve_config(args)
    grid = load_grid_file(args.grid)
    spec = ExperimentSpec(
        "sweep", args.data, grids=grid.get("axes", {}),
        sweep_mode=grid.get("mode", "per_axis"), budget=int(grid.get("budget", 64)),
    )
    split = load_data(args.data, config.max_len)
    rows = run_sweep(config, split, spec.grids, args.out, spec.sweep_mode, spec.budget)
    print(f"{len(rows)} sweep cells written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
