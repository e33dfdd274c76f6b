"""Batch construction, warm-up gating and the joint training loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .augment import (
    DEFAULT_INTENSITIES,
    AugmentationKind,
    AugmentationPolicy,
    MultiLevelViews,
    generate_flat_views,
    generate_multilevel_views,
    view_stream,
)
from .corpus import SplitDataset
from .evaluation import evaluate
from .model import HCLRecModel, pad_batch, save_checkpoint
from .objective import LossWeights, final_loss, info_nce, next_item_loss, total_contrastive
from .similarity import SimilarityIndex, load_or_build

logger = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    warmup_epochs: int = 5
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    d: int = 64
    heads: int = 2
    layers: int = 2
    max_len: int = 50
    max_level: int = 3
    dropout: float = 0.2
    seed: int = 42
    early_stop_patience: int = 40
    lambdas: tuple[float, ...] = (0.1, 0.075, 0.05)
    temperatures: tuple[float, ...] = (1.0, 1.5, 2.0)
    threshold: int = 4
    short_set: tuple[str, ...] = ("insert", "substitute", "mask")
    long_set: tuple[str, ...] = ("insert", "substitute", "mask", "reorder", "crop")
    rho_insert: float = DEFAULT_INTENSITIES[AugmentationKind.INSERT]
    rho_substitute: float = DEFAULT_INTENSITIES[AugmentationKind.SUBSTITUTE]
    rho_mask: float = DEFAULT_INTENSITIES[AugmentationKind.MASK]
    rho_reorder: float = DEFAULT_INTENSITIES[AugmentationKind.REORDER]
    rho_crop: float = DEFAULT_INTENSITIES[AugmentationKind.CROP]
    similarity_weighting: str = "iuf-log"
    sim: str = "dot"
    representation: str = "last"
    contrastive: bool = True
    use_blocks: bool = True
    flat_aug: bool = False
    grad_clip: float = 0.0
    exclude_seen: bool = True
    eval_every: int = 1
    dtype: str = "float32"
    audit_views: bool = False

    def __post_init__(self) -> None:
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.temperatures = tuple(float(x) for x in self.temperatures)
        self.short_set = tuple(self.short_set)
        self.long_set = tuple(self.long_set)
        for name in ("batch_size", "epochs", "d", "heads", "layers", "max_len", "max_level"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")
        if self.contrastive and len(self.lambdas) < self.levels:
            raise ValueError(f"need {self.levels} lambdas/temperatures, got {len(self.lambdas)}")
        if len(self.lambdas) != len(self.temperatures):
            raise ValueError("lambdas and temperatures differ in length")

    @property
    def levels(self) -> int:
        """Number of contrastive losses per step."""
        return 1 if self.flat_aug else self.max_level

    @property
    def n_blocks(self) -> int:
        return self.max_level - 1 if self.use_blocks and not self.flat_aug else 0

    def loss_weights(self) -> LossWeights:
        # flat augmentation keeps only the level-1 weight and temperature
        return LossWeights(self.lambdas[: self.levels], self.temperatures[: self.levels])

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            short_set=self.short_set,
            long_set=self.long_set,
            threshold=self.threshold,
            max_level=self.max_level,
            intensities={
                AugmentationKind.INSERT: self.rho_insert,
                AugmentationKind.SUBSTITUTE: self.rho_substitute,
                AugmentationKind.MASK: self.rho_mask,
                AugmentationKind.REORDER: self.rho_reorder,
                AugmentationKind.CROP: self.rho_crop,
            },
            max_len=self.max_len,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def override(self, pairs: dict[str, str]) -> "TrainConfig":
        """Return a copy with string-valued overrides coerced to field types."""
        hints = typing.get_type_hints(type(self))
        values = self.to_dict()
        for key, raw in pairs.items():
            if key not in hints:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = coerce(raw, hints[key])
        return type(self).from_dict(values)


def coerce(raw: Any, hint) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(hint)
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if origin is tuple:
        inner = typing.get_args(hint)[0]
        text = raw.strip().strip("[]()")
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(coerce(p, inner) for p in parts)
    return raw


def load_config_file(path: str | Path) -> dict[str, str | Any]:
    """JSON object, a run's ``run.json`` header, or flat ``key=value`` lines."""
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        values = json.loads(stripped)
        if isinstance(values.get("config"), dict):
            return values["config"]
        return values
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


@dataclass
class Batch:
    users: list[int]
    inputs: torch.Tensor  # B x T
    targets: torch.Tensor  # B x T, 0 where no target
    negatives: torch.Tensor  # B x T
    views: list[MultiLevelViews] = field(default_factory=list)


def sample_negatives(
    targets: np.ndarray, seen: set[int], n_items: int, rng: np.random.Generator
) -> np.ndarray:
    """One uniform negative outside ``seen`` per non-padding target."""
    out = np.zeros_like(targets)
    if len(seen) >= n_items:
        raise ValueError("user has interacted with every item; no negatives exist")
    for i, t in enumerate(targets):
        if t == 0:
            continue
        neg = int(rng.integers(1, n_items + 1))
        while neg in seen:
            neg = int(rng.integers(1, n_items + 1))
        out[i] = neg
    return out


def epoch_batches(users: list[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(len(users))
    shuffled = [users[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def build_batch(
    split: SplitDataset,
    users: list[int],
    config: TrainConfig,
    neg_rng: np.random.Generator,
    epoch: int,
    index: SimilarityIndex | None,
    with_views: bool,
) -> Batch:
    train = split.train
    t = config.max_len
    inputs, targets, negatives = [], [], []
    for u in users:
        seq = train[u]
        inp = np.zeros(t, dtype=np.int64)
        tgt = np.zeros(t, dtype=np.int64)
        x, y = list(seq[:-1])[-t:], list(seq[1:])[-t:]
        if x:
            inp[t - len(x):] = x
            tgt[t - len(y):] = y
        inputs.append(inp)
        targets.append(tgt)
        negatives.append(sample_negatives(tgt, set(seq), split.n_items, neg_rng))
    views = []
    if with_views:
        policy = config.policy()
        make = generate_flat_views if config.flat_aug else generate_multilevel_views
        for u in users:
            views.append(make(train[u], policy, index, view_stream(config.seed, epoch, u), u))
    return Batch(
        users,
        torch.from_numpy(np.stack(inputs)),
        torch.from_numpy(np.stack(targets)),
        torch.from_numpy(np.stack(negatives)),
        views,
    )


def _dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


class Trainer:
    """Owns the model, optimizer and random streams for one training run."""

    def __init__(
        self,
        config: TrainConfig,
        split: SplitDataset,
        out_dir: str | Path | None = None,
        index: SimilarityIndex | None = None,
    ):
        self.config = config
        self.split = split.with_max_len(config.max_len)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        seed = config.seed
        torch.manual_seed(seed)
        self.model = HCLRecModel(
            split.n_items,
            config.d,
            config.heads,
            config.layers,
            config.max_len,
            n_blocks=config.n_blocks,
            dropout=config.dropout,
            representation=config.representation,
        ).to(_dtype(config.dtype))
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
        )
        # explicit zero buffers so idle parameters (blocks in warm-up) are inspectable
        for p in self.model.parameters():
            p.grad = torch.zeros_like(p)
        self.sr_noise = torch.Generator().manual_seed(seed + 1)
        self.cl_noise = torch.Generator().manual_seed(seed + 2)
        root = np.random.SeedSequence(seed)
        order_seq, neg_seq = root.spawn(2)
        self.order_rng = np.random.default_rng(order_seq)
        self.neg_rng = np.random.default_rng(neg_seq)
        self.users = [u for u in self.split.users if len(self.split.train[u]) >= 1]
        if index is None and config.contrastive:
            index = load_or_build(
                self.split.train_sequences(),
                self.split.n_items,
                weighting=config.similarity_weighting,
            )
        self.index = index
        self.epoch = 0
        self.history: list[dict[str, float]] = []
        self.step_log: list[dict[str, float]] = []
        self.best_ndcg = -math.inf
        self.best_epoch = 0

    def in_warmup(self, epoch: int) -> bool:
        return epoch < self.config.warmup_epochs

    def contrastive_losses(self, views: list[MultiLevelViews]) -> list[torch.Tensor]:
        model, cfg = self.model, self.config
        model.noise = self.cl_noise
        losses = []
        for level in range(cfg.levels):
            a = pad_batch([v.pairs[level][0] for v in views], cfg.max_len)
            b = pad_batch([v.pairs[level][1] for v in views], cfg.max_len)
            h = model(torch.cat([a, b], 0))
            # without blocks every level contrasts at the encoder output
            if model.n_blocks:
                h = model.hierarchical_forward(h, level + 1)
            reps = model.sequence_representation(h)
            ra, rb = reps[: len(views)], reps[len(views):]
            losses.append(info_nce(ra, rb, cfg.temperatures[level], cfg.sim))
        return losses

    def train_step(self, batch: Batch, epoch: int) -> dict[str, float]:
        model, cfg = self.model, self.config
        model.train()
        self.optimizer.zero_grad(set_to_none=False)
        model.noise = self.sr_noise
        h = model(batch.inputs)
        l_sr = next_item_loss(h, batch.targets, batch.negatives, model.item_embedding.weight)
        record = {"l_sr": l_sr.item()}
        total = l_sr
        if batch.views:
            levels = self.contrastive_losses(batch.views)
            l_cl = total_contrastive(levels, cfg.loss_weights())
            total = final_loss(l_sr, l_cl)
            for m, loss in enumerate(levels, 1):
                record[f"l_cl_{m}"] = loss.item()
        record["total"] = total.item()
        if not torch.isfinite(total):
            self._dump_batch(batch, epoch, record)
            raise NumericError(f"non-finite loss at epoch {epoch}: {record}")
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        model.zero_padding()
        return record

    def block_grad_max(self) -> float:
        grads = [p.grad.abs().max().item() for p in self.model.blocks.parameters()
                 if p.grad is not None and p.grad.numel()]
        return max(grads, default=0.0)

    def train_epoch(self) -> dict[str, float]:
        cfg, epoch = self.config, self.epoch
        with_views = cfg.contrastive and not self.in_warmup(epoch)
        self.model.block_traversals.clear()
        self.model.level_calls.clear()
        sums: dict[str, float] = {}
        n_batches = 0
        block_grad = 0.0
        for users in epoch_batches(self.users, cfg.batch_size, self.order_rng):
            batch = build_batch(self.split, users, cfg, self.neg_rng, epoch, self.index, with_views)
            if cfg.audit_views and batch.views and self.out_dir is not None:
                self._audit(batch, epoch)
            rec = self.train_step(batch, epoch)
            rec["step"] = len(self.step_log)
            rec["epoch"] = epoch
            self.step_log.append(rec)
            for k, v in rec.items():
                if k.startswith("l_") or k == "total":
                    sums[k] = sums.get(k, 0.0) + v
            block_grad = max(block_grad, self.block_grad_max())
            n_batches += 1
        metrics = {"epoch": epoch}
        metrics.update({k: v / n_batches for k, v in sums.items()})
        for m in range(1, cfg.levels + 1):
            metrics.setdefault(f"l_cl_{m}", 0.0)
        metrics["warmup"] = int(self.in_warmup(epoch))
        metrics["block_grad_max"] = block_grad
        for m in range(1, cfg.max_level + 1):
            calls = self.model.level_calls.get(m, 0)
            metrics[f"level{m}_calls"] = calls
            metrics[f"level{m}_blocks"] = self.model.block_traversals.get(m, 0)
        self.epoch += 1
        return metrics

    def validate(self) -> dict[str, float]:
        report = evaluate(self.model, self.split, stage="valid", exclude_seen=self.config.exclude_seen)
        return {f"valid_{k}": v for k, v in report.metrics.items()}

    def fit(self, epochs: int | None = None) -> list[dict[str, float]]:
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "timing.csv").write_text("epoch,seconds\n")
        stale = 0
        for _ in range(epochs):
            start = time.perf_counter()
            metrics = self.train_epoch()
            if cfg.eval_every and (metrics["epoch"] + 1) % cfg.eval_every == 0:
                metrics.update(self.validate())
            elapsed = time.perf_counter() - start
            self.history.append(metrics)
            ndcg = metrics.get("valid_NDCG@10")
            if ndcg is not None:
                if ndcg > self.best_ndcg:
                    self.best_ndcg, self.best_epoch, stale = ndcg, metrics["epoch"], 0
                    self._checkpoint("best.npz")
                else:
                    stale += 1
            self._write_logs(elapsed)
            logger.info("epoch %d %s", metrics["epoch"],
                        " ".join(f"{k}={v:.4f}" for k, v in metrics.items()
                                 if isinstance(v, float)))
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                logger.info("early stop after %d stale epochs", stale)
                break
        self._checkpoint("last.npz")
        return self.history

    def _checkpoint(self, name: str) -> None:
        if self.out_dir is None:
            return
        save_checkpoint(self.model, self.out_dir / name, seed=self.config.seed,
                        epoch=self.epoch, max_level=self.config.max_level)

    def _write_logs(self, elapsed: float) -> None:
        if self.out_dir is None:
            return
        write_csv(self.out_dir / "metrics.csv", self.history)
        write_csv(self.out_dir / "steps.csv", self.step_log)
        with open(self.out_dir / "timing.csv", "a", newline="") as fh:
            csv.writer(fh).writerow([self.history[-1]["epoch"], f"{elapsed:.3f}"])

    def _audit(self, batch: Batch, epoch: int) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "views.jsonl", "a") as fh:
            for views in batch.views:
                rec = json.loads(views.to_json())
                rec["epoch"] = epoch
                fh.write(json.dumps(rec) + "\n")

    def _dump_batch(self, batch: Batch, epoch: int, record: dict) -> None:
        if self.out_dir is None:
            return
        dump = {
            "epoch": epoch,
            "losses": record,
            "users": batch.users,
            "inputs": batch.inputs.tolist(),
            "views": [json.loads(v.to_json()) for v in batch.views],
        }
        (self.out_dir / "nonfinite_batch.json").write_text(json.dumps(dump))


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    fields: list[str] = []
    for row in rows:
        for k in row:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
