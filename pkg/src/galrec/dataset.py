"""Interaction ingestion, k-core filtering, leave-one-out splits and synthetic data."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """Raised for malformed input files; carries the offending line number."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    timestamp: int

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("interaction keys must be nonempty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class Catalog:
    """Dense id assignment for users and items.

    ``user_keys[i]`` is the key of user id ``i``; the reverse maps are built on
    construction.
    """

    user_keys: tuple[str, ...]
    item_keys: tuple[str, ...]
    user_index: dict[str, int] = field(init=False, repr=False, compare=False)
    item_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "user_index", {k: i for i, k in enumerate(self.user_keys)})
        object.__setattr__(self, "item_index", {k: i for i, k in enumerate(self.item_keys)})
        if len(self.user_index) != len(self.user_keys) or len(self.item_index) != len(self.item_keys):
            raise ValueError("catalog keys must be unique")

    @property
    def num_users(self) -> int:
        return len(self.user_keys)

    @property
    def num_items(self) -> int:
        return len(self.item_keys)

    def keys_for(self, side: str) -> tuple[str, ...]:
        if side == "user":
            return self.user_keys
        if side == "item":
            return self.item_keys
        raise ValueError(f"unknown side {side!r}")

    def index_for(self, side: str) -> dict[str, int]:
        if side == "user":
            return self.user_index
        if side == "item":
            return self.item_index
        raise ValueError(f"unknown side {side!r}")

    def export(self, path) -> None:
        """Write ``kind<TAB>key<TAB>id`` rows, users first."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for kind, keys in (("user", self.user_keys), ("item", self.item_keys)):
                for i, key in enumerate(keys):
                    fh.write(f"{kind}\t{key}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Catalog":
        users: dict[int, str] = {}
        items: dict[int, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or parts[0] not in ("user", "item"):
                    raise DataFormatError(path, lineno, "expected kind<TAB>key<TAB>id")
                (users if parts[0] == "user" else items)[int(parts[2])] = parts[1]
        return cls(tuple(users[i] for i in range(len(users))), tuple(items[i] for i in range(len(items))))


@dataclass(frozen=True)
class InteractionDataset:
    sequences: tuple[tuple[int, ...], ...]
    counts: tuple[int, ...]

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_items(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[tuple[int, ...], ...]
    val_target: tuple[int, ...]
    test_target: tuple[int, ...]
    num_items: int

    @property
    def num_users(self) -> int:
        return len(self.train)

    def full_sequence(self, user: int) -> tuple[int, ...]:
        return self.train[user] + (self.val_target[user], self.test_target[user])

    def to_json(self) -> dict:
        return {
            "num_items": self.num_items,
            "train": [list(s) for s in self.train],
            "val_target": list(self.val_target),
            "test_target": list(self.test_target),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitDataset":
        return cls(
            train=tuple(tuple(s) for s in obj["train"]),
            val_target=tuple(obj["val_target"]),
            test_target=tuple(obj["test_target"]),
            num_items=int(obj["num_items"]),
        )


@dataclass(frozen=True)
class ItemMetadata:
    title: dict[int, str]
    description: dict[int, str]
    category: dict[int, str]
    brand: dict[int, str]
    skipped: int = 0

    FIELDS = ("title", "description", "category", "brand")

    def get(self, field_name: str, item: int) -> str | None:
        return getattr(self, field_name).get(item)


def ingest_interactions(path) -> list[RawInteraction]:
    """Parse a ``user<TAB>item<TAB>timestamp`` file, preserving line order."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.endswith("\r"):
                line = line[:-1]
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            try:
                stamp = int(ts)
            except ValueError:
                raise DataFormatError(path, lineno, f"bad timestamp {ts!r}") from None
            try:
                out.append(RawInteraction(user, item, stamp))
            except ValueError as exc:
                raise DataFormatError(path, lineno, str(exc)) from None
    return out


def write_interactions(interactions: Iterable[RawInteraction], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in interactions:
            fh.write(f"{r.user_key}\t{r.item_key}\t{r.timestamp}\n")


def core_filter(interactions: Sequence[RawInteraction], k: int = 5) -> tuple[InteractionDataset, Catalog]:
    """Iteratively drop users and items with fewer than ``k`` interactions.

    Repeats until neither side changes. Ids are assigned in first-appearance
    order over the surviving interactions, and each user sequence is sorted by
    timestamp with ties kept in input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    alive = list(interactions)
    while True:
        users = Counter(r.user_key for r in alive)
        items = Counter(r.item_key for r in alive)
        kept = [r for r in alive if users[r.user_key] >= k and items[r.item_key] >= k]
        if len(kept) == len(alive):
            break
        alive = kept

    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    for r in alive:
        user_ids.setdefault(r.user_key, len(user_ids))
        item_ids.setdefault(r.item_key, len(item_ids))

    per_user: list[list[tuple[int, int]]] = [[] for _ in user_ids]
    counts = [0] * len(item_ids)
    for r in alive:
        iid = item_ids[r.item_key]
        per_user[user_ids[r.user_key]].append((r.timestamp, iid))
        counts[iid] += 1
    # list.sort is stable, so equal timestamps keep input order
    sequences = tuple(tuple(i for _, i in sorted(events, key=lambda e: e[0])) for events in per_user)
    catalog = Catalog(tuple(user_ids), tuple(item_ids))
    return InteractionDataset(sequences, tuple(counts)), catalog


def leave_one_out_split(ds: InteractionDataset) -> SplitDataset:
    """Last item is the test target, the one before it the validation target."""
    train, val, test = [], [], []
    for user, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            raise ValueError(f"user {user} has {len(seq)} interactions; leave-one-out needs at least 3")
        train.append(tuple(seq[:-2]))
        val.append(seq[-2])
        test.append(seq[-1])
    return SplitDataset(tuple(train), tuple(val), tuple(test), ds.num_items)


def ingest_item_metadata(path, catalog: Catalog) -> ItemMetadata:
    """Read JSON-lines item metadata; unknown item keys are counted and skipped."""
    fields: dict[str, dict[int, str]] = {f: {} for f in ItemMetadata.FIELDS}
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict) or "item" not in obj:
                raise DataFormatError(path, lineno, "expected an object with an 'item' key")
            iid = catalog.item_index.get(str(obj["item"]))
            if iid is None:
                skipped += 1
                continue
            for f in ItemMetadata.FIELDS:
                value = obj.get(f)
                if value is not None:
                    fields[f][iid] = str(value)
    if skipped:
        logger.warning("skipped %d metadata rows with unknown item keys", skipped)
    return ItemMetadata(skipped=skipped, **fields)


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_blocks: int,
    interactions_per_user: int,
    p_in: float,
    seed: int,
) -> list[RawInteraction]:
    """Planted-cluster interactions.

    Users and items are split into ``num_blocks`` equal contiguous blocks. Each
    draw picks an item from the user's own block with probability ``p_in``,
    otherwise uniformly from the whole catalog. Timestamps are the per-user
    draw index.
    """
    if num_blocks < 1 or num_users % num_blocks or num_items % num_blocks:
        raise ValueError("num_blocks must divide both num_users and num_items")
    if not 0.0 <= p_in <= 1.0:
        raise ValueError("p_in must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    users_per_block = num_users // num_blocks
    items_per_block = num_items // num_blocks
    out = []
    for u in range(num_users):
        start = (u // users_per_block) * items_per_block
        for t in range(interactions_per_user):
            if rng.random() < p_in:
                item = start + int(rng.integers(items_per_block))
            else:
                item = int(rng.integers(num_items))
            out.append(RawInteraction(f"u{u}", f"i{item}", t))
    return out


def synthetic_block_of(key: str, num_entities: int, num_blocks: int) -> int:
    """Planted block of a synthetic ``u<n>``/``i<n>`` key."""
    return int(key[1:]) // (num_entities // num_blocks)


def save_split(split: SplitDataset, path) -> None:
    Path(path).write_text(json.dumps(split.to_json()) + "\n", encoding="utf-8")


def load_split(path) -> SplitDataset:
    return SplitDataset.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
