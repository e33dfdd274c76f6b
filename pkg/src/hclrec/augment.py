"""Sequence augmentation operators and remove-one multi-level view generation."""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .similarity import SimilarityIndex

logger = logging.getLogger(__name__)


class AugmentationKind(str, enum.Enum):
    INSERT = "insert"
    SUBSTITUTE = "substitute"
    MASK = "mask"
    REORDER = "reorder"
    CROP = "crop"


ALL_KINDS = tuple(AugmentationKind)

DEFAULT_INTENSITIES = {
    AugmentationKind.INSERT: 0.4,
    AugmentationKind.SUBSTITUTE: 0.4,
    AugmentationKind.MASK: 0.3,
    AugmentationKind.REORDER: 0.2,
    AugmentationKind.CROP: 0.4,
}

# operators that need at least two items to do anything
_NEEDS_TWO = {AugmentationKind.MASK, AugmentationKind.REORDER, AugmentationKind.CROP}


def n_affected(rho: float, length: int) -> int:
    """ceil(rho * length), guarded against float noise such as 0.3 * 10."""
    return max(1, math.ceil(round(rho * length, 9)))


def _cap(seq: list[int], max_len: int | None) -> list[int]:
    if max_len is not None and len(seq) > max_len:
        return seq[-max_len:]
    return seq


def insert(
    seq: Sequence[int],
    rho: float,
    index: SimilarityIndex,
    rng: np.random.Generator,
    max_len: int | None = None,
) -> list[int]:
    seq = list(seq)
    if not seq:
        raise ValueError("insert needs a non-empty sequence")
    k = min(n_affected(rho, len(seq)), len(seq))
    chosen = set(rng.choice(len(seq), size=k, replace=False).tolist())
    out: list[int] = []
    for pos, item in enumerate(seq):
        if pos in chosen:
            anchor = seq[pos - 1] if pos > 0 else item
            new = index.top1(anchor)
            if new is None:
                new = int(rng.integers(1, index.n_items + 1))
                logger.debug("no neighbour for item %d, inserting random item %d", anchor, new)
            out.append(new)
        out.append(item)
    return _cap(out, max_len)


def substitute(
    seq: Sequence[int], rho: float, index: SimilarityIndex, rng: np.random.Generator
) -> list[int]:
    out = list(seq)
    if not out:
        raise ValueError("substitute needs a non-empty sequence")
    k = min(n_affected(rho, len(out)), len(out))
    for pos in rng.choice(len(out), size=k, replace=False).tolist():
        new = index.top1(out[pos])
        if new is None:
            logger.debug("no neighbour for item %d, keeping it", out[pos])
            continue
        out[pos] = new
    return out


def mask(seq: Sequence[int], rho: float, rng: np.random.Generator) -> list[int]:
    """Delete ceil(rho * len) items, always leaving at least one."""
    seq = list(seq)
    if len(seq) < 2:
        logger.debug("mask skipped on length-%d sequence", len(seq))
        return seq
    k = min(n_affected(rho, len(seq)), len(seq) - 1)
    drop = set(rng.choice(len(seq), size=k, replace=False).tolist())
    return [item for pos, item in enumerate(seq) if pos not in drop]


def reorder(seq: Sequence[int], rho: float, rng: np.random.Generator) -> list[int]:
    seq = list(seq)
    if len(seq) < 2:
        logger.debug("reorder skipped on length-%d sequence", len(seq))
        return seq
    k = min(n_affected(rho, len(seq)), len(seq))
    start = int(rng.integers(0, len(seq) - k + 1))
    window = seq[start:start + k]
    seq[start:start + k] = [window[i] for i in rng.permutation(k)]
    return seq


def crop(seq: Sequence[int], rho: float, rng: np.random.Generator) -> list[int]:
    seq = list(seq)
    if len(seq) < 2:
        logger.debug("crop skipped on length-%d sequence", len(seq))
        return seq
    k = min(n_affected(rho, len(seq)), len(seq))
    start = int(rng.integers(0, len(seq) - k + 1))
    return seq[start:start + k]


def applicable(kind: AugmentationKind, length: int) -> bool:
    if kind in _NEEDS_TWO:
        return length >= 2
    return length >= 1


def apply(
    kind: AugmentationKind,
    seq: Sequence[int],
    rho: float,
    index: SimilarityIndex | None,
    rng: np.random.Generator,
    max_len: int | None = None,
) -> list[int]:
    if kind is AugmentationKind.INSERT:
        return insert(seq, rho, index, rng, max_len)
    if kind is AugmentationKind.SUBSTITUTE:
        return substitute(seq, rho, index, rng)
    if kind is AugmentationKind.MASK:
        return mask(seq, rho, rng)
    if kind is AugmentationKind.REORDER:
        return reorder(seq, rho, rng)
    return crop(seq, rho, rng)


def _as_kinds(kinds) -> tuple[AugmentationKind, ...]:
    out = tuple(AugmentationKind(k) for k in kinds)
    # enum order keeps sampling independent of how the set was written
    return tuple(k for k in ALL_KINDS if k in out)


@dataclass
class AugmentationPolicy:
    short_set: tuple[AugmentationKind, ...] = (
        AugmentationKind.INSERT,
        AugmentationKind.SUBSTITUTE,
        AugmentationKind.MASK,
    )
    long_set: tuple[AugmentationKind, ...] = ALL_KINDS
    threshold: int = 4
    max_level: int = 3
    intensities: dict[AugmentationKind, float] = field(
        default_factory=lambda: dict(DEFAULT_INTENSITIES)
    )
    max_len: int | None = 50

    def __post_init__(self) -> None:
        self.short_set = _as_kinds(self.short_set)
        self.long_set = _as_kinds(self.long_set)
        self.intensities = {AugmentationKind(k): float(v) for k, v in self.intensities.items()}
        if self.max_level < 1:
            raise ValueError("max_level must be >= 1")
        if len(self.short_set) < self.max_level or len(self.long_set) < self.max_level:
            raise ValueError(
                f"remove-one needs at least {self.max_level} kinds in both augmentation sets"
            )
        for kind in set(self.short_set) | set(self.long_set):
            rho = self.intensities.get(kind)
            if rho is None or not 0.0 < rho <= 1.0:
                raise ValueError(f"intensity for {kind.value} must lie in (0, 1]")

    def kinds_for(self, length: int) -> tuple[AugmentationKind, ...]:
        return self.short_set if length < self.threshold else self.long_set


@dataclass
class MultiLevelViews:
    user_index: int
    pairs: list[tuple[list[int], list[int]]]
    chains: tuple[list[AugmentationKind], list[AugmentationKind]]

    @property
    def levels(self) -> int:
        return len(self.pairs)

    def to_json(self) -> str:
        return json.dumps({
            "user": self.user_index,
            "levels": [
                {
                    "level": m + 1,
                    "kinds_a": [k.value for k in self.chains[0][: m + 1]],
                    "kinds_b": [k.value for k in self.chains[1][: m + 1]],
                    "view_a": a,
                    "view_b": b,
                }
                for m, (a, b) in enumerate(self.pairs)
            ],
        })


def _chain(
    seq: list[int],
    policy: AugmentationPolicy,
    kinds: tuple[AugmentationKind, ...],
    index: SimilarityIndex | None,
    rng: np.random.Generator,
) -> tuple[list[list[int]], list[AugmentationKind]]:
    views, used = [], []
    current = seq
    for _ in range(policy.max_level):
        candidates = [k for k in kinds if k not in used and applicable(k, len(current))]
        if not candidates:
            logger.debug("no applicable augmentation left, carrying view forward")
            views.append(list(current))
            continue
        kind = candidates[int(rng.integers(len(candidates)))]
        current = apply(kind, current, policy.intensities[kind], index, rng, policy.max_len)
        used.append(kind)
        views.append(current)
    return views, used


def generate_multilevel_views(
    seq: Sequence[int],
    policy: AugmentationPolicy,
    index: SimilarityIndex | None,
    rng: np.random.Generator,
    user_index: int = -1,
) -> MultiLevelViews:
    """Two independent remove-one chains, one per view of each level pair.

    Each chain draws from its own child stream of ``rng`` so chain b never
    perturbs chain a.
    """
    seq = list(seq)
    if not seq:
        raise ValueError("cannot augment an empty sequence")
    kinds = policy.kinds_for(len(seq))
    rng_a, rng_b = rng.spawn(2)
    views_a, used_a = _chain(seq, policy, kinds, index, rng_a)
    views_b, used_b = _chain(seq, policy, kinds, index, rng_b)
    return MultiLevelViews(user_index, list(zip(views_a, views_b)), (used_a, used_b))


def generate_flat_views(
    seq: Sequence[int],
    policy: AugmentationPolicy,
    index: SimilarityIndex | None,
    rng: np.random.Generator,
    user_index: int = -1,
) -> MultiLevelViews:
    """One pair whose views each carry all M operators applied at once."""
    full = generate_multilevel_views(seq, policy, index, rng, user_index)
    return MultiLevelViews(user_index, [full.pairs[-1]], full.chains)


def view_stream(seed: int, epoch: int, user: int) -> np.random.Generator:
    """Per-user stream, independent of batch order and worker scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, epoch, user]))
