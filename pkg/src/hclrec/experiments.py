"""Ablation and hyperparameter sweep harness."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .corpus import SplitDataset
from .evaluation import evaluate
from .model import load_checkpoint
from .train import TrainConfig, Trainer, write_csv

logger = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_blocks", "flat_aug", "no_warmup", "coserec_mode")
COMMANDS = ("preprocess", "train", "eval", "ablate", "sweep")
SWEEP_AXES = ("temperatures", "lambdas", "d", "batch_size", "threshold")


class UsageError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    command: str
    data: str | None = None
    overrides: dict[str, Any] = field(default_factory=dict)
    out_dir: str = "runs"
    variants: list[tuple[str, ...]] = field(default_factory=list)
    grids: dict[str, list] = field(default_factory=dict)
    sweep_mode: str = "per_axis"
    budget: int = 64

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        for variant in self.variants:
            bad = [f for f in variant if f not in ABLATION_FLAGS and f != "full"]
            if bad:
                raise UsageError(f"unknown ablation flag(s) {bad}")
        if self.variants and self.command not in ("ablate", "train"):
            raise UsageError(f"ablation flags are not valid with {self.command}")
        if self.command == "sweep":
            if not self.grids or any(not v for v in self.grids.values()):
                raise UsageError("sweep needs at least one non-empty grid")
            unknown = set(self.grids) - set(SWEEP_AXES)
            if unknown:
                raise UsageError(f"unknown sweep axes {sorted(unknown)}")
            if self.sweep_mode not in ("per_axis", "cartesian"):
                raise UsageError("sweep mode must be per_axis or cartesian")


def parse_variants(text: str) -> list[tuple[str, ...]]:
    """``"full,no_blocks,no_blocks+no_warmup"`` -> one flag tuple per variant."""
    out = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if chunk:
            out.append(tuple(f.strip() for f in chunk.split("+") if f.strip()))
    return out


def apply_flags(config: TrainConfig, flags: Sequence[str]) -> TrainConfig:
    values = config.to_dict()
    for flag in flags:
        if flag == "full":
            continue
        if flag == "no_blocks":
            values["use_blocks"] = False
        elif flag == "flat_aug":
            values["flat_aug"] = True
        elif flag == "no_warmup":
            values["warmup_epochs"] = 0
        elif flag == "coserec_mode":
            values["max_level"] = 1
            values["lambdas"] = tuple(values["lambdas"][:1])
            values["temperatures"] = tuple(values["temperatures"][:1])
        else:
            raise UsageError(f"unknown ablation flag {flag!r}")
    return TrainConfig.from_dict(values)


def variant_name(flags: Sequence[str]) -> str:
    return "+".join(flags) if flags else "full"


def dataset_hash(split: SplitDataset) -> str:
    h = hashlib.sha256()
    for user in split.users:
        h.update(json.dumps([user, list(split.sequences[user])]).encode())
    h.update(str(split.n_items).encode())
    return h.hexdigest()


def write_run_header(out_dir: Path, config: TrainConfig, data_hash: str, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"config": config.to_dict(), "seed": config.seed, "dataset_sha256": data_hash, **extra}
    (out_dir / "run.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def run_training(
    config: TrainConfig, split: SplitDataset, out_dir: str | Path, **header_extra
) -> tuple[Trainer, dict[str, float]]:
    """Train, then report test metrics from the best validation checkpoint."""
    out = Path(out_dir)
    write_run_header(out, config, dataset_hash(split), **header_extra)
    trainer = Trainer(config, split, out)
    trainer.fit()
    best = out / "best.npz"
    if best.exists():
        model, _ = load_checkpoint(best)
    else:
        model = trainer.model
    report = evaluate(model, trainer.split, exclude_seen=config.exclude_seen)
    report.write(out / "test_report.json", out / "test_ranks.csv")
    return trainer, report.metrics


def run_ablation(
    base: TrainConfig,
    datasets: dict[str, SplitDataset],
    variants: Sequence[Sequence[str]],
    out_dir: str | Path,
) -> list[dict[str, Any]]:
    """Train every variant on every dataset with the same seed and inputs."""
    out = Path(out_dir)
    rows = []
    hashes = {name: dataset_hash(split) for name, split in datasets.items()}
    for flags in variants:
        name = variant_name(flags)
        config = apply_flags(base, flags)
        row: dict[str, Any] = {"variant": name}
        for ds_name, split in datasets.items():
            if dataset_hash(split) != hashes[ds_name]:
                raise RuntimeError(f"dataset {ds_name} changed between variants")
            trainer, metrics = run_training(
                config, split, out / ds_name / name,
                variant=name, n_blocks=config.n_blocks,
            )
            row[f"{ds_name}/Hit@10"] = metrics["Hit@10"]
            row[f"{ds_name}/NDCG@10"] = metrics["NDCG@10"]
            row[f"{ds_name}/valid_NDCG@10"] = trainer.best_ndcg
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", rows)
    (out / "ablation.md").write_text(format_table(rows, list(datasets)))
    return rows


def format_table(rows: list[dict[str, Any]], datasets: Sequence[str]) -> str:
    header = "| Model | " + " | ".join(f"{d} Hit@10 | {d} NDCG@10" for d in datasets) + " |"
    sep = "|---" * (1 + 2 * len(datasets)) + "|"
    lines = [header, sep]
    for i, row in enumerate(rows, 1):
        cells = []
        for d in datasets:
            cells += [f"{row[f'{d}/Hit@10']:.4f}", f"{row[f'{d}/NDCG@10']:.4f}"]
        lines.append(f"| ({i}) {row['variant']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def constrained_grid(
    values: Sequence[float], levels: int, order: str = "descending", equal_gap: bool = True
) -> list[tuple[float, ...]]:
    """Level tuples from ``values`` that are strictly monotone, optionally equally spaced."""
    if order not in ("descending", "ascending"):
        raise ValueError("order must be ascending or descending")
    out = []
    for combo in itertools.product(sorted(set(values)), repeat=levels):
        diffs = [b - a for a, b in zip(combo, combo[1:])]
        if order == "descending" and not all(d < 0 for d in diffs):
            continue
        if order == "ascending" and not all(d > 0 for d in diffs):
            continue
        if equal_gap and diffs and not all(math.isclose(d, diffs[0], rel_tol=1e-9, abs_tol=1e-12)
                                           for d in diffs):
            continue
        out.append(tuple(combo))
    return out


def expand_axis(spec: Any, levels: int) -> list:
    """Grid axis from a plain list or a ``{"values", "order", "equal_gap"}`` rule."""
    if isinstance(spec, dict):
        return constrained_grid(spec["values"], spec.get("levels", levels),
                                spec.get("order", "descending"), spec.get("equal_gap", True))
    return [tuple(v) if isinstance(v, list) else v for v in spec]


def sweep_cells(grids: dict[str, list], mode: str) -> list[dict[str, Any]]:
    if mode == "cartesian":
        keys = list(grids)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]
    return [{key: v} for key, values in grids.items() for v in values]


def load_grid_file(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())


def run_sweep(
    base: TrainConfig,
    split: SplitDataset,
    grids: dict[str, Any],
    out_dir: str | Path,
    mode: str = "per_axis",
    budget: int = 64,
) -> list[dict[str, Any]]:
    expanded = {k: expand_axis(v, base.max_level) for k, v in grids.items()}
    cells = sweep_cells(expanded, mode)
    if len(cells) > budget:
        raise UsageError(f"sweep has {len(cells)} cells, over the budget of {budget}")
    out = Path(out_dir)
    rows = []
    for i, cell in enumerate(cells):
        config = TrainConfig.from_dict({**base.to_dict(), **cell})
        trainer, metrics = run_training(config, split, out / f"cell{i:03d}", cell=_jsonable(cell))
        row = {"cell": i, **{k: _label(v) for k, v in cell.items()}}
        row.update(metrics)
        row["valid_NDCG@10"] = trainer.best_ndcg
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", rows)
    plot_sweep(rows, list(expanded), out)
    return rows


def _label(v: Any) -> str | float | int:
    if isinstance(v, (tuple, list)):
        return "/".join(f"{x:g}" for x in v)
    return v


def _jsonable(cell: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cell.items()}


def plot_sweep(rows: list[dict[str, Any]], axes: Sequence[str], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for axis in axes:
        sub = [r for r in rows if axis in r]
        if not sub:
            continue
        labels = [str(r[axis]) for r in sub]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for metric in ("Hit@5", "NDCG@5", "Hit@10", "NDCG@10"):
            ax.plot(range(len(sub)), [r[metric] for r in sub], marker="o", label=metric)
        ax.set_xticks(range(len(sub)), labels, rotation=30, fontsize=7)
        ax.set_xlabel(axis)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"sweep_{axis}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
