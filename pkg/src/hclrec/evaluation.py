"""Full-catalog ranking evaluation: Hit@K and NDCG@K."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import SplitDataset
from .model import HCLRecModel, pad_batch

DEFAULT_KS = (5, 10)


@dataclass
class RankingReport:
    per_user_rank: dict[int, int]
    metrics: dict[str, float]
    cohort: str | None = None

    def to_dict(self) -> dict:
        return {
            "cohort": self.cohort,
            "users": len(self.per_user_rank),
            "metrics": self.metrics,
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["user", "rank", "cohort"])
                for user in sorted(self.per_user_rank):
                    writer.writerow([user, self.per_user_rank[user], self.cohort or ""])


def rank_target(scores: np.ndarray, target: int, exclude: Iterable[int] = ()) -> int:
    """1-based rank of ``target``; ties count against the target."""
    exclude = set(exclude)
    if target in exclude:
        raise ValueError(f"target {target} is in the exclusion set")
    scores = np.asarray(scores)
    beaten = scores >= scores[target]
    beaten[target] = False
    if exclude:
        beaten[list(exclude)] = False
    return 1 + int(beaten.sum())


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hit_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def aggregate(ranks: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    ranks = list(ranks)
    out: dict[str, float] = {}
    n = len(ranks)
    for k in ks:
        out[f"Hit@{k}"] = sum(hit_at_k(r, k) for r in ranks) / n if n else 0.0
        out[f"NDCG@{k}"] = sum(ndcg_at_k(r, k) for r in ranks) / n if n else 0.0
    return out


@torch.no_grad()
def rank_users(
    model: HCLRecModel,
    cases: dict[int, tuple[Sequence[int], int]],
    batch_size: int = 512,
    exclude_seen: bool = True,
) -> dict[int, int]:
    """Encoder-only ranking of each user's target over all items."""
    was_training = model.training
    model.eval()
    users = sorted(cases)
    ranks: dict[int, int] = {}
    try:
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            prefixes = [cases[u][0] for u in chunk]
            targets = torch.tensor([cases[u][1] for u in chunk])
            batch = pad_batch(prefixes, model.max_len).to(model.item_embedding.weight.device)
            scores = model.predict_scores(model(batch))
            if exclude_seen:
                rows = batch.clone()
                # a repeated target stays rankable
                rows[rows == targets[:, None]] = 0
                scores.scatter_(1, rows, float("-inf"))
            target_scores = scores.gather(1, targets[:, None])
            beaten = (scores >= target_scores).sum(1) - 1
            for u, r in zip(chunk, beaten.tolist()):
                ranks[u] = 1 + r
    finally:
        model.train(was_training)
    return ranks


def evaluate(
    model: HCLRecModel,
    split: SplitDataset,
    ks: Sequence[int] = DEFAULT_KS,
    cohort_threshold: int | None = None,
    stage: str = "test",
    exclude_seen: bool = True,
    batch_size: int = 512,
) -> RankingReport | dict[str, RankingReport]:
    """Rank every user's held-out item; optionally split by prefix length."""
    if stage not in ("test", "valid"):
        raise ValueError("stage must be 'test' or 'valid'")
    cases = split.test if stage == "test" else split.valid
    ranks = rank_users(model, cases, batch_size, exclude_seen)
    if cohort_threshold is None:
        return RankingReport(ranks, aggregate(ranks.values(), ks))
    reports = {}
    for name, keep in (("short", lambda n: n < cohort_threshold),
                       ("long", lambda n: n >= cohort_threshold)):
        sub = {u: r for u, r in ranks.items() if keep(len(cases[u][0]))}
        reports[name] = RankingReport(sub, aggregate(sub.values(), ks), cohort=name)
    return reports
