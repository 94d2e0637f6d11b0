"""InfoNCE, the six directed hop-alignment terms, next-item cross-entropy and their weighted sum.

Term layout (query from the trainable encoder, key and negatives from the
momentum encoder):

    l1_user: query user 2-hop,  key user 0-hop, negatives queue user0
    l1_item: query item 2-hop,  key item 0-hop, negatives queue item0
    l2_user: query item 1-hop,  key user 2-hop, negatives queue user2
    l2_item: query user 1-hop,  key item 2-hop, negatives queue item2
    l3_user: query item 1-hop,  key user 0-hop, negatives queue user0
    l3_item: query user 1-hop,  key item 0-hop, negatives queue item0

The query is the argument held fixed in each denominator; the varying one is
the negative pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .moco import QueueBank

TERMS = ("l1_user", "l1_item", "l2_user", "l2_item", "l3_user", "l3_item")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    weight_decay: float = 1e-3
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative")

    @property
    def contrastive(self) -> bool:
        return any((self.lambda1, self.lambda2, self.lambda3))


@dataclass
class HopEmbeddings:
    """Pooled 0/1/2-hop views; each tensor is (d2,) or (batch, d2)."""

    e0: torch.Tensor
    e1: torch.Tensor
    e2: torch.Tensor


@dataclass
class LossBreakdown:
    l0: torch.Tensor
    l1_user: torch.Tensor
    l1_item: torch.Tensor
    l2_user: torch.Tensor
    l2_item: torch.Tensor
    l3_user: torch.Tensor
    l3_item: torch.Tensor
    total: torch.Tensor

    def values(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _unit(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return x / norm


def info_nce_batch(query: torch.Tensor, key: torch.Tensor, negatives: torch.Tensor | None,
                   tau: float) -> torch.Tensor:
    """Per-row InfoNCE with cosine similarity.

    ``query`` and ``key`` are (B, d); ``negatives`` is (n, d) shared by every
    row, or None. Keys and negatives are detached. Returns (B,) losses.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    q = _unit(query)
    pos = (q * _unit(key.detach())).sum(-1, keepdim=True) / tau
    if negatives is None or negatives.shape[0] == 0:
        return torch.zeros(q.shape[0], dtype=q.dtype)
    neg = q @ _unit(negatives.detach()).T / tau
    logits = torch.cat([pos, neg], dim=1)
    top = logits.max(dim=1, keepdim=True).values.detach()
    lse = top[:, 0] + torch.log(torch.exp(logits - top).sum(dim=1))
    return lse - pos[:, 0]


def info_nce(query, positive_key, negatives, tau: float) -> torch.Tensor:
    """Single-query InfoNCE; ``negatives`` is a list of vectors or an (n, d) tensor."""
    query = torch.as_tensor(query)
    if isinstance(negatives, (list, tuple)):
        negatives = torch.stack([torch.as_tensor(n, dtype=query.dtype) for n in negatives]) if negatives else None
    key = torch.as_tensor(positive_key, dtype=query.dtype)
    return info_nce_batch(query[None], key[None], negatives, tau)[0]


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    return t[None] if t.ndim == 1 else t


def _pair(bank, role_u, role_i, q_user, k_user, q_item, k_item, tau):
    lu = info_nce_batch(_as_batch(q_user), _as_batch(k_user), bank[role_u].snapshot(), tau)
    li = info_nce_batch(_as_batch(q_item), _as_batch(k_item), bank[role_i].snapshot(), tau)
    return lu.mean(), li.mean()


def loss_l1(user_q: HopEmbeddings, user_k: HopEmbeddings, item_q: HopEmbeddings, item_k: HopEmbeddings,
            bank: QueueBank, tau: float, push: bool = True):
    """2-hop vs 0-hop on each side; then enqueue the 0-hop keys."""
    out = _pair(bank, "user0", "item0", user_q.e2, user_k.e0, item_q.e2, item_k.e0, tau)
    if push:
        bank["user0"].push(_as_batch(user_k.e0))
        bank["item0"].push(_as_batch(item_k.e0))
    return out


def loss_l2(user_q: HopEmbeddings, user_k: HopEmbeddings, item_q: HopEmbeddings, item_k: HopEmbeddings,
            bank: QueueBank, tau: float, push: bool = True):
    """User 2-hop vs item 1-hop and item 2-hop vs user 1-hop; then enqueue the 2-hop keys."""
    out = _pair(bank, "user2", "item2", item_q.e1, user_k.e2, user_q.e1, item_k.e2, tau)
    if push:
        bank["user2"].push(_as_batch(user_k.e2))
        bank["item2"].push(_as_batch(item_k.e2))
    return out


def loss_l3(user_q: HopEmbeddings, user_k: HopEmbeddings, item_q: HopEmbeddings, item_k: HopEmbeddings,
            bank: QueueBank, tau: float):
    """User 0-hop vs item 1-hop and item 0-hop vs user 1-hop; reuses the 0-hop queues."""
    return _pair(bank, "user0", "item0", item_q.e1, user_k.e0, user_q.e1, item_k.e0, tau)


def loss_ce(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over rows; 1-d logits are a single row."""
    logits = _as_batch(logits)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    m = logits.shape[1]
    if bool(((target < 0) | (target >= m)).any()):
        raise IndexError(f"target outside [0, {m})")
    top = logits.max(dim=1, keepdim=True).values.detach()
    lse = top[:, 0] + torch.log(torch.exp(logits - top).sum(dim=1))
    return (lse - logits.gather(1, target[:, None])[:, 0]).mean()


def total_loss(l0: torch.Tensor, terms: dict[str, torch.Tensor], weights: LossWeights) -> LossBreakdown:
    """l0 + lambda1 (l1u + l1i) + lambda2 (l2u + l2i) + lambda3 (l3u + l3i).

    Parameter regularization is not part of this sum; the optimizer applies it
    as decoupled weight decay.
    """
    zero = torch.zeros((), dtype=l0.dtype)
    t = {name: terms.get(name, zero) for name in TERMS}
    total = (l0
             + weights.lambda1 * (t["l1_user"] + t["l1_item"])
             + weights.lambda2 * (t["l2_user"] + t["l2_item"])
             + weights.lambda3 * (t["l3_user"] + t["l3_item"]))
    return LossBreakdown(l0=l0, total=total, **t)
