"""Prompt construction and a small pre-norm transformer encoder with external-embedding slots.

Token sequences carry *slots*: positions whose input row is the mapped external
vector of a user or item instead of that token's own embedding. Everything is
batched internally; the single-sequence helpers are thin wrappers.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embeddings import ExternalEmbeddingTable, MappingLayer
from .graph import ITEM, USER, HopNeighborhood

TEMPLATE_WORDS = (
    "<pad>", "Profile", "of", ":", "Interacted", "items", "users", "Similar",
    "User", "interacted", "with", ";", "similar", "predict", "the", "next", "item",
)
CHECKPOINT_MAGIC = b"GALREC1"


class Vocabulary:
    """Template words, then one token per user, then one token per item."""

    def __init__(self, num_users: int, num_items: int):
        self.words = TEMPLATE_WORDS
        self.word_ids = {w: i for i, w in enumerate(self.words)}
        self.num_users = num_users
        self.num_items = num_items
        self.user_offset = len(self.words)
        self.item_offset = self.user_offset + num_users

    def __len__(self) -> int:
        return self.item_offset + self.num_items

    def word(self, w: str) -> int:
        return self.word_ids[w]

    def node(self, side: str, node: int) -> int:
        if side == USER:
            if not 0 <= node < self.num_users:
                raise KeyError(f"unknown user id {node}")
            return self.user_offset + node
        if side == ITEM:
            if not 0 <= node < self.num_items:
                raise KeyError(f"unknown item id {node}")
            return self.item_offset + node
        raise ValueError(f"unknown side {side!r}")

    def render(self, token: int) -> str:
        if token < self.user_offset:
            return self.words[token]
        if token < self.item_offset:
            return f"<U{token - self.user_offset}>"
        return f"<I{token - self.item_offset}>"


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    slots: tuple[tuple[int, str, int], ...] = ()  # (position, side, node id)

    def __len__(self) -> int:
        return len(self.token_ids)

    def render(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.render(t) for t in self.token_ids)


class _Builder:
    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.tokens: list[int] = []
        self.slots: list[tuple[int, str, int]] = []

    def words(self, text: str) -> "_Builder":
        self.tokens.extend(self.vocab.word(w) for w in text.split())
        return self

    def nodes(self, side: str, ids: Sequence[int]) -> "_Builder":
        for node in ids:
            self.slots.append((len(self.tokens), side, int(node)))
            self.tokens.append(self.vocab.node(side, node))
        return self

    def build(self) -> TokenSequence:
        return TokenSequence(tuple(self.tokens), tuple(self.slots))


def _plural(side: str) -> str:
    return "users" if side == USER else "items"


def build_hop_prompt(hood: HopNeighborhood, hop: int, vocab: Vocabulary, max_len: int = 64) -> TokenSequence:
    """Render the 0-, 1- or 2-hop view of ``hood`` as a token sequence.

    Neighbor lists are cut from the front (oldest first) to fit ``max_len``;
    the template words are always kept. The anchor itself is not part of the
    1- and 2-hop views.
    """
    b = _Builder(vocab)
    other = ITEM if hood.side == USER else USER
    if hop == 0:
        b.words("Profile of").nodes(hood.side, [hood.anchor]).words(":")
        return b.build()
    if hop == 1:
        if not hood.one_hop:
            raise ValueError(f"{hood.side} {hood.anchor} has an empty 1-hop view")
        b.words(f"Interacted {_plural(other)} :")
        ids, side = hood.one_hop, other
    elif hop == 2:
        b.words(f"Similar {_plural(hood.side)} :")
        ids, side = hood.two_hop_flat(), hood.side
    else:
        raise ValueError(f"hop must be 0, 1 or 2, got {hop}")
    budget = max_len - len(b.tokens)
    if budget < 1:
        raise ValueError(f"max_len={max_len} leaves no room for neighbors")
    return b.nodes(side, ids[len(ids) - budget:] if len(ids) > budget else ids).build()


REC_FIXED_TOKENS = 13


def build_recommendation_prompt(user: int, hood: HopNeighborhood, vocab: Vocabulary,
                                target: int | None = None, max_len: int = 64):
    """Next-item prompt: user token, history items, similar users.

    ``hood`` must be sampled over the history that precedes ``target``. When the
    prompt is too long, the oldest history items go first, then similar users
    from the oldest groups.
    """
    if hood.side != USER or hood.anchor != user:
        raise ValueError("recommendation prompt needs the user's own neighborhood")
    history = hood.one_hop
    if not history:
        raise ValueError(f"user {user} has an empty history")
    budget = max_len - REC_FIXED_TOKENS
    if budget < 1:
        raise ValueError(f"max_len={max_len} is shorter than the prompt template")
    history = history[-budget:]
    similar = hood.two_hop_flat()
    room = budget - len(history)
    similar = similar[len(similar) - room:] if room > 0 else ()
    seq = (_Builder(vocab)
           .words("User").nodes(USER, [user]).words("interacted with")
           .nodes(ITEM, history)
           .words("; similar users").nodes(USER, similar)
           .words("; predict the next item :")
           .build())
    return seq, target


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class EncoderConfig:
    d2: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 128
    max_len: int = 64

    def __post_init__(self):
        if self.d2 % self.num_heads:
            raise ValueError("d2 must be divisible by num_heads")


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d2
        self.num_heads = cfg.num_heads
        self.ln1 = nn.LayerNorm(d)
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, d)

    def attention(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.num_heads
        dh = d // h

        def heads(t):
            return t.view(B, L, h, dh).transpose(1, 2)

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(B, L, d))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x), mask)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class Encoder(nn.Module):
    """Token + positional embeddings and a pre-norm self-attention stack."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.token_embeddings = nn.Parameter(torch.randn(vocab_size, cfg.d2) * 0.02)
        self.positional_embeddings = nn.Parameter(torch.randn(cfg.max_len, cfg.d2) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.num_layers))

    def encode(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, L, d2) inputs and (B, L) validity mask -> (B, d2) mean-pooled outputs."""
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite encoder input")
        for block in self.blocks:
            x = block(x, mask)
        w = mask.to(x.dtype)
        return (x * w[..., None]).sum(1) / w.sum(1, keepdim=True)


class GalRecModel(nn.Module):
    """Encoder, mapping layer and the (frozen) external tables it reads slots from."""

    def __init__(self, vocab: Vocabulary, cfg: EncoderConfig, user_table: ExternalEmbeddingTable,
                 item_table: ExternalEmbeddingTable, seed: int = 0, dtype: torch.dtype = torch.float64,
                 init_from_external: bool = False):
        super().__init__()
        if user_table.dim_d1 != item_table.dim_d1:
            raise ValueError("user and item tables must share d1")
        if user_table.vectors.shape[0] != vocab.num_users or item_table.vectors.shape[0] != vocab.num_items:
            raise ValueError("external tables do not match the vocabulary sizes")
        self.vocab = vocab
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg, len(vocab))
            self.mapper = MappingLayer(user_table.dim_d1, cfg.d2, dtype=torch.float32)
        self.to(dtype)
        self.register_buffer("user_ext", torch.as_tensor(user_table.vectors, dtype=dtype))
        self.register_buffer("item_ext", torch.as_tensor(item_table.vectors, dtype=dtype))
        if init_from_external:
            self.init_tokens_from_external()

    @torch.no_grad()
    def init_tokens_from_external(self) -> None:
        """Start user/item token rows at their mapped external vectors.

        Only the starting point is shared: the rows stay independent parameters.
        """
        v = self.vocab
        emb = self.encoder.token_embeddings
        emb[v.user_offset:v.item_offset] = self.mapper(self.user_ext)
        emb[v.item_offset:v.item_offset + v.num_items] = self.mapper(self.item_ext)

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.token_embeddings.dtype

    def batch_inputs(self, seqs: Sequence[TokenSequence]):
        """Pad a list of sequences into index tensors."""
        L = max(len(s) for s in seqs)
        if L > self.cfg.max_len:
            raise ValueError(f"sequence of length {L} exceeds max_len={self.cfg.max_len}")
        B = len(seqs)
        tokens = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        slot_user = np.zeros((B, L), dtype=bool)
        slot_item = np.zeros((B, L), dtype=bool)
        node = np.zeros((B, L), dtype=np.int64)
        for b, s in enumerate(seqs):
            tokens[b, :len(s)] = s.token_ids
            mask[b, :len(s)] = True
            for pos, side, nid in s.slots:
                (slot_user if side == USER else slot_item)[b, pos] = True
                node[b, pos] = nid
        return tuple(torch.from_numpy(a) for a in (tokens, mask, slot_user, slot_item, node))

    def embed(self, seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
        """Input rows: token embedding, or mapped external vector at slots, plus position."""
        tokens, mask, slot_user, slot_item, node = self.batch_inputs(seqs)
        enc = self.encoder
        x = enc.token_embeddings[tokens]
        if slot_user.any() or slot_item.any():
            n_users = self.user_ext.shape[0]
            ext = torch.cat([self.user_ext, self.item_ext])
            rows = torch.where(slot_item, node + n_users, node)
            mapped = self.mapper(ext[rows])
            x = torch.where((slot_user | slot_item)[..., None], mapped, x)
        x = x + enc.positional_embeddings[: tokens.shape[1]]
        return x, mask

    def encode_sequences(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        x, mask = self.embed(seqs)
        return self.encoder.encode(x, mask)

    def item_logits(self, prompt_embedding: torch.Tensor) -> torch.Tensor:
        v = self.vocab
        items = self.encoder.token_embeddings[v.item_offset: v.item_offset + v.num_items]
        return prompt_embedding @ items.T


def embed_sequence(seq: TokenSequence, model: GalRecModel) -> torch.Tensor:
    x, _ = model.embed([seq])
    return x[0]


def encode_pooled(matrix: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    if matrix.shape[0] < 1:
        raise ValueError("empty sequence")
    mask = torch.ones(1, matrix.shape[0], dtype=torch.bool)
    return encoder.encode(matrix[None], mask)[0]


def predict_item_logits(prompt_embedding: torch.Tensor, model: GalRecModel) -> torch.Tensor:
    return model.item_logits(prompt_embedding)


def init_momentum_clone(model: GalRecModel) -> GalRecModel:
    """Deep copy with gradients disabled; shares no storage with ``model``."""
    clone = copy.deepcopy(model)
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


# --------------------------------------------------------------------------
# checkpoints: magic, newline, JSON header line, float32 little-endian payload


def save_checkpoint(path, model: GalRecModel, config: dict, seed: int) -> None:
    state = model.state_dict()
    header = {
        "version": 1,
        "seed": seed,
        "config": config,
        "num_users": model.vocab.num_users,
        "num_items": model.vocab.num_items,
        "encoder": asdict(model.cfg),
        "d1": model.mapper.d1,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in state.values():
            fh.write(v.detach().cpu().contiguous().numpy().astype("<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        header = json.loads(fh.readline())
        tensors = {}
        for spec in header["tensors"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated tensor {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(spec["shape"]).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return header, tensors


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> tuple[GalRecModel, dict]:
    header, tensors = read_checkpoint(path)
    vocab = Vocabulary(header["num_users"], header["num_items"])
    cfg = EncoderConfig(**header["encoder"])
    user = ExternalEmbeddingTable(USER, tensors["user_ext"].astype(np.float64))
    item = ExternalEmbeddingTable(ITEM, tensors["item_ext"].astype(np.float64))
    model = GalRecModel(vocab, cfg, user, item, seed=header["seed"], dtype=dtype)
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    return model, header
