"""Preference-structured toy interaction log for smoke runs and tests."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import Interaction

BUNDLED = "synthetic.tsv"


def generate(
    n_users: int = 200,
    n_items: int = 50,
    n_clusters: int = 5,
    min_len: int = 5,
    max_len: int = 20,
    follow: float = 0.8,
    stray: float = 0.05,
    seed: int = 7,
) -> list[Interaction]:
    """Users walk a ring inside a home cluster of items.

    With probability ``follow`` the next item is the successor on the ring,
    with ``stray`` it is any item, otherwise a random item of the home cluster.
    """
    rng = np.random.default_rng(seed)
    size = n_items // n_clusters
    rows = []
    for u in range(n_users):
        home = int(rng.integers(n_clusters))
        length = int(rng.integers(min_len, max_len + 1))
        item = home * size + int(rng.integers(size))
        ts = 1_000_000 + u * 10_000
        for _ in range(length):
            rows.append(Interaction(f"u{u:04d}", f"i{item:03d}", ts))
            ts += int(rng.integers(1, 100))
            draw = rng.random()
            if draw < follow:
                item = home * size + (item - home * size + 1) % size
            elif draw < follow + stray:
                item = int(rng.integers(n_items))
            else:
                item = home * size + int(rng.integers(size))
    return rows


def write_tsv(rows: list[Interaction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in rows:
            fh.write(f"{x.user}\t{x.item}\t{x.timestamp}\n")


def bundled_path() -> Path:
    return Path(str(resources.files("hclrec") / "data" / BUNDLED))
