"""Interaction log loading, k-core filtering and leave-one-out splitting."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

FORMATS = ("tsv", "amazon-csv", "yelp-json")


class DataError(ValueError):
    """Raised for unreadable or malformed input data."""


class ConfigError(ValueError):
    """Raised for invalid loader/pipeline configuration."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int

    def __post_init__(self) -> None:
        if not self.user or not self.item:
            raise DataError("user and item ids must be non-empty")


@dataclass(frozen=True)
class UserSequence:
    user_index: int
    items: tuple[int, ...]


@dataclass
class ItemVocabulary:
    backward: list[str] = field(default_factory=lambda: ["<pad>"])
    forward: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_ids(cls, raw_ids: Iterable[str]) -> "ItemVocabulary":
        vocab = cls()
        for raw in raw_ids:
            vocab.add(raw)
        return vocab

    def add(self, raw: str) -> int:
        idx = self.forward.get(raw)
        if idx is None:
            idx = len(self.backward)
            self.forward[raw] = idx
            self.backward.append(raw)
        return idx

    @property
    def size(self) -> int:
        """Number of real items; dense indices run 1..size, 0 is padding."""
        return len(self.backward) - 1


@dataclass
class SplitDataset:
    """Leave-one-out split over full chronological sequences.

    ``sequences`` holds the untruncated dense sequence per user. Train keeps
    everything but the last two items; validation and test prefixes are
    left-truncated to ``max_len``.
    """

    sequences: dict[int, tuple[int, ...]]
    n_items: int
    max_len: int
    excluded_users: int = 0

    @property
    def users(self) -> list[int]:
        return sorted(self.sequences)

    @property
    def train(self) -> dict[int, tuple[int, ...]]:
        return {u: s[:-2] for u, s in self.sequences.items()}

    @property
    def valid(self) -> dict[int, tuple[tuple[int, ...], int]]:
        return {u: (s[:-2][-self.max_len:], s[-2]) for u, s in self.sequences.items()}

    @property
    def test(self) -> dict[int, tuple[tuple[int, ...], int]]:
        return {u: (s[:-1][-self.max_len:], s[-1]) for u, s in self.sequences.items()}

    def train_sequences(self) -> list[UserSequence]:
        return [UserSequence(u, s[:-2]) for u, s in sorted(self.sequences.items())]

    def with_max_len(self, max_len: int) -> "SplitDataset":
        return SplitDataset(dict(self.sequences), self.n_items, max_len, self.excluded_users)

    def subset(self, users: Iterable[int]) -> "SplitDataset":
        keep = set(users)
        return SplitDataset(
            {u: s for u, s in self.sequences.items() if u in keep},
            self.n_items,
            self.max_len,
            self.excluded_users,
        )


def _parse_int(value: str, lineno: int) -> int:
    try:
        return int(float(value))
    except ValueError as exc:
        raise DataError(f"line {lineno}: bad timestamp {value!r}") from exc


def _make(user: str, item: str, ts: int, lineno: int) -> Interaction:
    user, item = user.strip(), item.strip()
    if not user or not item:
        raise DataError(f"line {lineno}: missing user or item field")
    return Interaction(user, item, ts)


def _load_tsv(path: Path) -> list[Interaction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                # tolerate single-space separated toy files
                parts = line.split()
            if len(parts) != 3:
                raise DataError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            out.append(_make(parts[0], parts[1], _parse_int(parts[2], lineno), lineno))
    return out


def _load_amazon_csv(path: Path) -> list[Interaction]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if lineno == 1 and row[-1].strip().lower() == "timestamp":
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            out.append(_make(row[0], row[1], _parse_int(row[3], lineno), lineno))
    return out


def _yelp_time(raw, lineno: int) -> int:
    if isinstance(raw, (int, float)):
        return int(raw)
    try:
        dt = datetime.strptime(raw, "%Y-%m-%d %H:%M:%S")
    except (TypeError, ValueError):
        try:
            dt = datetime.strptime(raw, "%Y-%m-%d")
        except (TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: bad date {raw!r}") from exc
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


def _load_yelp_json(path: Path) -> list[Interaction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                user, item, date = rec["user_id"], rec["business_id"], rec["date"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"line {lineno}: malformed review record") from exc
            out.append(_make(str(user), str(item), _yelp_time(date, lineno), lineno))
    return out


def load_interactions(path: str | Path, format: str) -> list[Interaction]:
    """Parse a raw log into one Interaction per row, without deduplication."""
    loaders = {"tsv": _load_tsv, "amazon-csv": _load_amazon_csv, "yelp-json": _load_yelp_json}
    if format not in loaders:
        raise ConfigError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return loaders[format](path)


def k_core_filter(interactions: Sequence[Interaction], k: int) -> list[Interaction]:
    """Iteratively drop users and items with fewer than ``k`` interactions."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    current = list(interactions)
    while True:
        users = Counter(x.user for x in current)
        items = Counter(x.item for x in current)
        kept = [x for x in current if users[x.user] >= k and items[x.item] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def build_split(
    interactions: Sequence[Interaction], max_len: int = 50
) -> tuple[SplitDataset, ItemVocabulary]:
    by_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, x in enumerate(interactions):
        by_user[x.user].append((x.timestamp, order, x.item))

    vocab = ItemVocabulary()
    sequences: dict[int, tuple[int, ...]] = {}
    excluded = 0
    # users are indexed in order of first appearance
    for user_raw, rows in by_user.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        if len(rows) < 3:
            excluded += 1
            continue
        sequences[len(sequences)] = tuple(vocab.add(item) for _, _, item in rows)
    if excluded:
        logger.warning("excluded %d users with fewer than 3 interactions", excluded)
    return SplitDataset(sequences, vocab.size, max_len, excluded), vocab


def dataset_stats(split: SplitDataset) -> dict[str, float]:
    users = len(split.sequences)
    interactions = sum(len(s) for s in split.sequences.values())
    items = len({i for s in split.sequences.values() for i in s})
    return {
        "users": users,
        "items": items,
        "interactions": interactions,
        "avg_length": interactions / users if users else 0.0,
        "sparsity": 1.0 - interactions / (users * items) if users and items else 1.0,
        "excluded_users": split.excluded_users,
    }


def write_split(split: SplitDataset, vocab: ItemVocabulary, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sequences.jsonl", "w", encoding="utf-8") as fh:
        for user in split.users:
            fh.write(json.dumps({"user": user, "items": list(split.sequences[user])}) + "\n")
    (out / "items.json").write_text(json.dumps(vocab.backward))
    stats = dataset_stats(split)
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    return stats


def read_split(data_dir: str | Path, max_len: int = 50) -> SplitDataset:
    path = Path(data_dir)
    if path.is_dir():
        path = path / "sequences.jsonl"
    if not path.exists():
        raise DataError(f"no split file at {path}")
    sequences = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sequences[int(rec["user"])] = tuple(int(i) for i in rec["items"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record") from exc
    items_file = path.parent / "items.json"
    if items_file.exists():
        n_items = len(json.loads(items_file.read_text())) - 1
    else:
        n_items = max((max(s) for s in sequences.values()), default=0)
    return SplitDataset(sequences, n_items, max_len)


def preprocess(
    path: str | Path, format: str, k: int = 5, max_len: int = 50
) -> tuple[SplitDataset, ItemVocabulary]:
    """Load, k-core filter and split in one go."""
    raw = load_interactions(path, format)
    return build_split(k_core_filter(raw, k), max_len)
