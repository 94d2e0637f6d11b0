"""Fixed-capacity negative queues and the momentum (EMA) update of the key encoder."""

from __future__ import annotations

import csv
from collections import deque
from typing import Iterable, Sequence

import torch
from torch import nn

ROLES = ("user0", "item0", "user2", "item2")


class NegativeQueue:
    """FIFO of detached vectors; the oldest entry is evicted once full."""

    def __init__(self, role: str, capacity: int = 512):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.role = role
        self.capacity = capacity
        self._entries: deque[torch.Tensor] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, vectors: Iterable[torch.Tensor]) -> None:
        for v in vectors:
            v = v.detach()
            if v.ndim != 1:
                raise ValueError("queue entries must be 1-d vectors")
            if not torch.isfinite(v).all():
                raise FloatingPointError(f"non-finite vector pushed to queue {self.role}")
            self._entries.append(v.clone())

    def snapshot(self) -> torch.Tensor | None:
        """Stacked copy of the contents, oldest first, or None when empty."""
        if not self._entries:
            return None
        return torch.stack(tuple(self._entries))

    def entries(self) -> list[torch.Tensor]:
        return [v.clone() for v in self._entries]


class QueueBank:
    def __init__(self, capacity: int = 512, roles: Sequence[str] = ROLES):
        if len(set(roles)) != len(roles):
            raise ValueError("queue roles must be distinct")
        self.queues = {r: NegativeQueue(r, capacity) for r in roles}

    def __getitem__(self, role: str) -> NegativeQueue:
        try:
            return self.queues[role]
        except KeyError:
            raise KeyError(f"unknown queue role {role!r}") from None

    def dump(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["role", "size", "index", "norm"])
            for role, q in self.queues.items():
                for i, v in enumerate(q.entries()):
                    w.writerow([role, len(q), i, f"{float(v.norm()):.6g}"])


def queue_push(bank: QueueBank, role: str, vectors) -> None:
    bank[role].push(vectors)


def queue_negatives(bank: QueueBank, role: str) -> list[torch.Tensor]:
    return bank[role].entries()


@torch.no_grad()
def momentum_update(theta_k: nn.Module, theta_q: nn.Module, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q over matching parameters."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    keys = dict(theta_k.named_parameters())
    queries = dict(theta_q.named_parameters())
    if keys.keys() != queries.keys():
        raise ValueError("momentum update between differently structured models")
    for name, pk in keys.items():
        pq = queries[name]
        if pk.shape != pq.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pk.shape)} vs {tuple(pq.shape)}")
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
