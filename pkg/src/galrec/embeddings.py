"""External embedding sources and the affine mapping into the encoder's token space."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import Catalog, DataFormatError, ItemMetadata, SplitDataset


class EmbeddingTableError(ValueError):
    pass


@dataclass(frozen=True)
class ExternalEmbeddingTable:
    side: str
    vectors: np.ndarray  # (num_nodes, dim_d1), row = dense id

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise EmbeddingTableError("embedding table must be 2-d")
        if not np.all(np.isfinite(self.vectors)):
            raise EmbeddingTableError("embedding table contains non-finite values")

    @property
    def dim_d1(self) -> int:
        return self.vectors.shape[1]

    def __getitem__(self, node: int) -> np.ndarray:
        return self.vectors[node]


def load_embedding_table(path, side: str, catalog: Catalog) -> ExternalEmbeddingTable:
    """Read a ``#dim=<d>`` headed table and order its rows by catalog id.

    Keys absent from the catalog are ignored; every catalog key must be present.
    """
    keys = catalog.keys_for(side)
    index = catalog.index_for(side)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#dim="):
            raise DataFormatError(path, 1, "missing '#dim=<d1>' header")
        try:
            dim = int(header[len("#dim="):])
        except ValueError:
            raise DataFormatError(path, 1, f"bad header {header!r}") from None
        if dim < 1:
            raise DataFormatError(path, 1, "dim must be >= 1")
        out = np.zeros((len(keys), dim))
        seen = np.zeros(len(keys), dtype=bool)
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, values = line.partition("\t")
            if not sep:
                raise DataFormatError(path, lineno, "expected key<TAB>values")
            try:
                row = [float(v) for v in values.split(",")]
            except ValueError:
                raise DataFormatError(path, lineno, "non-numeric value") from None
            if len(row) != dim:
                raise EmbeddingTableError(f"{path}:{lineno}: row has {len(row)} values, header declares dim={dim}")
            node = index.get(key)
            if node is not None:
                out[node] = row
                seen[node] = True
    if not seen.all():
        missing = [keys[i] for i in np.flatnonzero(~seen)[:10]]
        raise EmbeddingTableError(
            f"{path}: {int((~seen).sum())} {side} keys missing, e.g. {', '.join(missing)}"
        )
    return ExternalEmbeddingTable(side, out)


def save_embedding_table(table: ExternalEmbeddingTable, keys: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#dim={table.dim_d1}\n")
        for key, vec in zip(keys, table.vectors):
            fh.write(key + "\t" + ",".join(repr(float(v)) for v in vec) + "\n")


def fallback_hash_embedding(key: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic vector in [-0.1, 0.1]^dim from a seeded BLAKE2b stream."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    salt = int(seed).to_bytes(8, "little", signed=False)
    words = []
    counter = 0
    while len(words) < dim:
        digest = hashlib.blake2b(key.encode("utf-8") + counter.to_bytes(4, "little"), key=salt).digest()
        words.extend(int.from_bytes(digest[j:j + 8], "little") for j in range(0, 64, 8))
        counter += 1
    u = np.array(words[:dim], dtype=np.float64) / 2.0**64
    return 0.2 * u - 0.1


def hash_table(side: str, keys: Sequence[str], dim: int, seed: int) -> ExternalEmbeddingTable:
    return ExternalEmbeddingTable(side, np.stack([fallback_hash_embedding(k, dim, seed) for k in keys]))


# --------------------------------------------------------------------------
# BPR matrix factorization, the built-in stand-in for an external recommender


@dataclass
class BprFactorModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    losses: list[float]

    def tables(self) -> tuple[ExternalEmbeddingTable, ExternalEmbeddingTable]:
        return (ExternalEmbeddingTable("user", self.user_factors.copy()),
                ExternalEmbeddingTable("item", self.item_factors.copy()))


def bpr_pair_loss(p_u: np.ndarray, q_pos: np.ndarray, q_neg: np.ndarray) -> float:
    """-log sigmoid(<p_u, q_pos> - <p_u, q_neg>), stable for large margins."""
    margin = float(p_u @ q_pos - p_u @ q_neg)
    return float(np.logaddexp(0.0, -margin))


def bpr_pair_grads(p_u, q_pos, q_neg):
    """Gradients of :func:`bpr_pair_loss` w.r.t. (p_u, q_pos, q_neg)."""
    margin = float(p_u @ q_pos - p_u @ q_neg)
    coef = -0.5 * (1.0 - math.tanh(margin / 2.0))  # -sigmoid(-margin)
    return coef * (q_pos - q_neg), coef * p_u, -coef * p_u


def train_bpr_mf(
    split: SplitDataset,
    d1: int = 64,
    epochs: int = 30,
    lr: float = 1e-2,
    seed: int = 0,
    reg: float = 1e-4,
    batch_size: int = 64,
) -> BprFactorModel:
    """Mini-batch SGD on the pairwise BPR objective, one sampled negative per positive."""
    if split.num_users == 0:
        raise ValueError("empty split")
    rng = np.random.default_rng(seed)
    n, m = split.num_users, split.num_items
    P = rng.normal(0.0, 0.1, size=(n, d1))
    Q = rng.normal(0.0, 0.1, size=(m, d1))
    users = np.array([u for u, seq in enumerate(split.train) for _ in seq], dtype=np.int64)
    pos = np.array([i for seq in split.train for i in seq], dtype=np.int64)
    seen = [set(seq) for seq in split.train]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(users))
        neg = np.empty(len(users), dtype=np.int64)
        for j, e in enumerate(order):
            cand = int(rng.integers(m))
            while cand in seen[users[e]] and len(seen[users[e]]) < m:
                cand = int(rng.integers(m))
            neg[j] = cand
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            u, i, k = users[idx], pos[idx], neg[start:start + batch_size]
            margin = np.einsum("bd,bd->b", P[u], Q[i] - Q[k])
            total += float(np.logaddexp(0.0, -margin).sum())
            coef = -0.5 * (1.0 - np.tanh(margin / 2.0))  # -sigmoid(-margin)
            gu = coef[:, None] * (Q[i] - Q[k]) + reg * P[u]
            gi = coef[:, None] * P[u] + reg * Q[i]
            gk = -coef[:, None] * P[u] + reg * Q[k]
            np.add.at(P, u, -lr * gu)
            np.add.at(Q, i, -lr * gi)
            np.add.at(Q, k, -lr * gk)
        losses.append(total / len(order))
    return BprFactorModel(P, Q, losses)


# --------------------------------------------------------------------------
# mapping layer g: R^d1 -> R^d2


class MappingLayer(nn.Module):
    """Affine map ``h @ weight + bias`` carrying external vectors into token space."""

    def __init__(self, d1: int, d2: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if d1 > d2:
            raise ValueError(f"mapping expects d1 <= d2, got d1={d1}, d2={d2}")
        bound = math.sqrt(6.0 / (d1 + d2))
        w = (torch.rand(d1, d2, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d2, dtype=dtype))

    @property
    def d1(self) -> int:
        return self.weight.shape[0]

    @property
    def d2(self) -> int:
        return self.weight.shape[1]

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d1:
            raise ValueError(f"expected external vectors of length {self.d1}, got {h.shape[-1]}")
        return h @ self.weight + self.bias


def map_external(h, layer: MappingLayer) -> torch.Tensor:
    h = torch.as_tensor(h, dtype=layer.weight.dtype)
    return layer(h)


def assemble_item_text(meta: ItemMetadata, item: int) -> str:
    def part(name):
        value = meta.get(name, item)
        return "unknown" if value is None else value

    return (f"Title: {part('title')}. Description: {part('description')}. "
            f"Category: {part('category')}. Brand: {part('brand')}.")
