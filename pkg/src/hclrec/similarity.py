"""Item-item co-occurrence similarity used by Insert and Substitute."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .corpus import UserSequence

WEIGHTINGS = ("iuf-log", "uniform")


def user_weight(length: int, weighting: str = "iuf-log") -> float:
    if weighting == "iuf-log":
        return 1.0 / math.log(1.0 + length)
    if weighting == "uniform":
        return 1.0
    raise ValueError(f"unknown weighting {weighting!r}")


class SimilarityIndex:
    """Sparse symmetric item-item scores plus precomputed top-k neighbours.

    ``scores`` is a CSR matrix of shape (n_items + 1, n_items + 1); row and
    column 0 belong to padding and stay empty.
    """

    def __init__(self, scores: sparse.csr_matrix, n_items: int, k: int = 1):
        self.scores = scores.tocsr()
        self.n_items = n_items
        self.k = k
        self.top_k = self._extract_top_k(k)

    def _extract_top_k(self, k: int) -> list[tuple[int, ...]]:
        top: list[tuple[int, ...]] = []
        indptr, indices, data = self.scores.indptr, self.scores.indices, self.scores.data
        for row in range(self.scores.shape[0]):
            cols = indices[indptr[row]:indptr[row + 1]]
            vals = data[indptr[row]:indptr[row + 1]]
            keep = (vals > 0) & (cols != row)
            cols, vals = cols[keep], vals[keep]
            # descending score, lower index wins ties
            order = np.lexsort((cols, -vals))[:k]
            top.append(tuple(int(c) for c in cols[order]))
        return top

    def score(self, i: int, j: int) -> float:
        return float(self.scores[i, j])

    def neighbors(self, item: int) -> tuple[int, ...]:
        if 0 < item < len(self.top_k):
            return self.top_k[item]
        return ()

    def top1(self, item: int) -> int | None:
        nb = self.neighbors(item)
        return nb[0] if nb else None

    def save(self, path: str | Path) -> None:
        s = self.scores.tocoo()
        np.savez(path, row=s.row, col=s.col, data=s.data, n_items=self.n_items, k=self.k)

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityIndex":
        z = np.load(path)
        n = int(z["n_items"])
        m = sparse.coo_matrix((z["data"], (z["row"], z["col"])), shape=(n + 1, n + 1))
        return cls(m.tocsr(), n, int(z["k"]))


def build_index(
    train_sequences: Sequence[UserSequence] | Iterable[Sequence[int]],
    n_items: int | None = None,
    weighting: str = "iuf-log",
    k: int = 1,
) -> SimilarityIndex:
    """score(i, j) = sum of w(u) over users whose sequence holds both i and j."""
    seqs = [s.items if isinstance(s, UserSequence) else tuple(s) for s in train_sequences]
    if n_items is None:
        n_items = max((max(s) for s in seqs if s), default=0)
    rows, cols = [], []
    for u, seq in enumerate(seqs):
        distinct = sorted(set(seq))
        rows.extend([u] * len(distinct))
        cols.extend(distinct)
    n_users = len(seqs)
    incidence = sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n_users, n_items + 1)
    )
    if n_users:
        w = sparse.diags(np.array([
            user_weight(len(seq), weighting) if seq else 0.0 for seq in seqs
        ]))
        scores = (incidence.T @ w @ incidence).tocsr()
    else:
        scores = sparse.csr_matrix((n_items + 1, n_items + 1))
    scores.setdiag(0.0)
    scores.eliminate_zeros()
    return SimilarityIndex(scores, n_items, k)


def cache_key(train_sequences: Sequence[UserSequence], weighting: str, k: int) -> str:
    h = hashlib.sha256()
    for s in train_sequences:
        h.update(json.dumps([s.user_index, list(s.items)]).encode())
    h.update(f"{weighting}:{k}".encode())
    return h.hexdigest()[:16]


def load_or_build(
    train_sequences: Sequence[UserSequence],
    n_items: int,
    cache_dir: str | Path | None = None,
    weighting: str = "iuf-log",
    k: int = 1,
) -> SimilarityIndex:
    if cache_dir is None:
        return build_index(train_sequences, n_items, weighting, k)
    path = Path(cache_dir) / f"similarity-{cache_key(train_sequences, weighting, k)}.npz"
    if path.exists():
        return SimilarityIndex.load(path)
    index = build_index(train_sequences, n_items, weighting, k)
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path)
    return index
