"""Bipartite user-item adjacency built from training prefixes, and hop sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import SplitDataset

USER, ITEM = "user", "item"


def _other(side: str) -> str:
    if side == USER:
        return ITEM
    if side == ITEM:
        return USER
    raise ValueError(f"unknown side {side!r}")


@dataclass(frozen=True)
class BipartiteIndex:
    user_to_items: tuple[tuple[int, ...], ...]
    item_to_users: tuple[tuple[int, ...], ...]

    @property
    def num_users(self) -> int:
        return len(self.user_to_items)

    @property
    def num_items(self) -> int:
        return len(self.item_to_users)

    def neighbors(self, side: str, node: int) -> tuple[int, ...]:
        table = self.user_to_items if side == USER else self.item_to_users
        if not 0 <= node < len(table):
            raise KeyError(f"unknown {side} id {node}")
        return table[node]

    def edges(self) -> set[tuple[int, int]]:
        return {(u, i) for u, items in enumerate(self.user_to_items) for i in items}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for u, items in enumerate(self.user_to_items):
                for i in dict.fromkeys(items):
                    fh.write(f"{u}\t{i}\n")


@dataclass(frozen=True)
class HopNeighborhood:
    """Anchor plus its sampled one-hop list and per-one-hop two-hop groups."""

    side: str
    anchor: int
    one_hop: tuple[int, ...]
    two_hop: tuple[tuple[int, ...], ...]

    @property
    def per_group_count(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.two_hop)

    def two_hop_flat(self) -> tuple[int, ...]:
        return tuple(x for g in self.two_hop for x in g)


def build_bipartite_index(split: SplitDataset) -> BipartiteIndex:
    """Adjacency over training prefixes only; validation/test targets never enter."""
    if split.num_users == 0:
        raise ValueError("empty split")
    item_users: list[dict[int, None]] = [{} for _ in range(split.num_items)]
    for u, seq in enumerate(split.train):
        for i in seq:
            item_users[i].setdefault(u)
    return BipartiteIndex(
        user_to_items=tuple(tuple(s) for s in split.train),
        item_to_users=tuple(tuple(d) for d in item_users),
    )


def sample_hops(
    index: BipartiteIndex,
    side: str,
    anchor: int,
    max_one_hop: int,
    min_two_hop: int,
    rng: np.random.Generator,
    one_hop: Sequence[int] | None = None,
) -> HopNeighborhood:
    """Sample a neighborhood around ``anchor``.

    The one-hop list is the most recent ``max_one_hop`` neighbors (or the
    explicit ``one_hop`` override, e.g. a history that excludes a held-out
    target). Each one-hop node contributes up to ``min_two_hop`` same-side
    nodes drawn uniformly without replacement, never the anchor itself; when
    fewer are available all are kept in adjacency order.
    """
    if max_one_hop < 1:
        raise ValueError("max_one_hop must be >= 1")
    opposite = _other(side)
    neighbors = index.neighbors(side, anchor)
    if one_hop is not None:
        neighbors = tuple(one_hop)
    first = tuple(neighbors[-max_one_hop:])
    groups = []
    for node in first:
        candidates = [x for x in dict.fromkeys(index.neighbors(opposite, node)) if x != anchor]
        if len(candidates) <= min_two_hop:
            groups.append(tuple(candidates))
        else:
            picks = rng.choice(len(candidates), size=min_two_hop, replace=False)
            groups.append(tuple(candidates[p] for p in picks))
    return HopNeighborhood(side, anchor, first, tuple(groups))


def sample_user_hops(index, user, rng, max_one_hop=10, min_two_hop_per_item=8, one_hop=None):
    return sample_hops(index, USER, user, max_one_hop, min_two_hop_per_item, rng, one_hop)


def sample_item_hops(index, item, rng, max_one_hop=10, min_two_hop_per_user=8, one_hop=None):
    return sample_hops(index, ITEM, item, max_one_hop, min_two_hop_per_user, rng, one_hop)
