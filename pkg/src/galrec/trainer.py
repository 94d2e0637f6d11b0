"""Joint next-item + hop-alignment training with momentum queues."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import SplitDataset
from .embeddings import ExternalEmbeddingTable
from .encoder import (EncoderConfig, GalRecModel, TokenSequence, Vocabulary, build_hop_prompt,
                      build_recommendation_prompt, init_momentum_clone)
from .graph import BipartiteIndex, build_bipartite_index, sample_item_hops, sample_user_hops
from .losses import TERMS, HopEmbeddings, LossBreakdown, LossWeights, info_nce_batch, loss_ce, total_loss
from .moco import QueueBank, momentum_update

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l0", "l1u", "l1i", "l2u", "l2i", "l3u", "l3i", "total", "lr")
DTYPES = {"float64": torch.float64, "float32": torch.float32}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    peak_lr: float = 5e-5
    warmup_fraction: float = 0.05
    weight_decay: float = 1e-3
    batch_size: int = 8
    accumulation_steps: int = 8
    epochs: int = 10
    seed: int = 0
    clip_norm: float | None = 1.0
    augment: bool = False
    # contrastive
    m: float = 0.999
    queue_capacity: int = 512
    num_negatives: int | None = None
    tau: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    explicit_l2: bool = False
    # graph sampling
    max_one_hop: int = 10
    min_two_hop: int = 8
    # encoder
    d1: int = 64
    d2: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dtype: str = "float64"
    init_tokens_from_external: bool = False
    # evaluation
    mask_seen: bool = True
    eval_every: int = 1
    # data preparation and external embeddings
    core_k: int = 5
    interactions: str | None = None
    metadata: str | None = None
    user_embeddings: str | None = None
    item_embeddings: str | None = None
    embedding_source: str = "bpr"  # used when no table paths are given: "bpr" or "hash"
    hash_seed: int = 0
    bpr_epochs: int = 30
    bpr_lr: float = 1e-2
    synth_users: int = 200
    synth_items: int = 100
    synth_blocks: int = 20
    synth_interactions_per_user: int = 10
    synth_p_in: float = 0.9

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("batch_size and accumulation_steps must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.embedding_source not in ("bpr", "hash"):
            raise ConfigError("embedding_source must be 'bpr' or 'hash'")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        self.weights  # validates tau and lambdas

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.weight_decay, self.tau)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d2, self.num_layers, self.num_heads, self.d_ff, self.max_len)

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return math.ceil(warmup_fraction * total_steps)


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg.warmup_fraction)
    if step <= w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * (total_steps - step) / (total_steps - w)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    uid: int  # stable id, seeds this example's neighborhood sampling
    user: int
    history: tuple[int, ...]
    target: int


def training_examples(split: SplitDataset, augment: bool = False) -> list[Example]:
    """One (history, next item) pair per user from the end of its training prefix.

    With ``augment`` every prefix position after the first becomes a target.
    """
    out = []
    for user, seq in enumerate(split.train):
        if len(seq) < 2:
            continue
        positions = range(1, len(seq)) if augment else (len(seq) - 1,)
        for t in positions:
            out.append(Example(len(out), user, tuple(seq[:t]), seq[t]))
    return out


@dataclass
class MicroBatch:
    prompts: list[TokenSequence]
    targets: list[int]
    user_views: list[list[TokenSequence]]  # [hop][example]
    item_views: list[list[TokenSequence]]


class Trainer:
    """Holds the query model, its momentum copy, the queues and the optimizer."""

    def __init__(self, split: SplitDataset, cfg: TrainConfig, user_table: ExternalEmbeddingTable,
                 item_table: ExternalEmbeddingTable, model: GalRecModel | None = None):
        self.split = split
        self.cfg = cfg
        self.weights = cfg.weights
        self.index: BipartiteIndex = build_bipartite_index(split)
        self.vocab = Vocabulary(split.num_users, split.num_items)
        self.model = model if model is not None else GalRecModel(
            self.vocab, cfg.encoder, user_table, item_table, seed=cfg.seed, dtype=cfg.torch_dtype,
            init_from_external=cfg.init_tokens_from_external)
        self.momentum = init_momentum_clone(self.model)
        self.bank = QueueBank(cfg.queue_capacity)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=0.0, betas=(0.9, 0.999), eps=1e-8,
                                           weight_decay=0.0 if cfg.explicit_l2 else cfg.weight_decay)
        self.step = 0
        self.total_steps = 1
        self._pending: list[dict[str, float]] = []
        self.log: list[dict] = []
        self.neg_rng = np.random.default_rng([cfg.seed, 7])

    # -- sampling ---------------------------------------------------------

    def example_rng(self, ex: Example, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, epoch, ex.uid])

    def prepare(self, examples: Sequence[Example], epoch: int = 0) -> MicroBatch:
        cfg = self.cfg
        prompts, targets = [], []
        user_views: list[list[TokenSequence]] = [[], [], []]
        item_views: list[list[TokenSequence]] = [[], [], []]
        for ex in examples:
            rng = self.example_rng(ex, epoch)
            uh = sample_user_hops(self.index, ex.user, rng, cfg.max_one_hop, cfg.min_two_hop, one_hop=ex.history)
            ih = sample_item_hops(self.index, ex.target, rng, cfg.max_one_hop, cfg.min_two_hop)
            seq, target = build_recommendation_prompt(ex.user, uh, self.vocab, ex.target, cfg.max_len)
            prompts.append(seq)
            targets.append(target)
            for hop in range(3):
                user_views[hop].append(build_hop_prompt(uh, hop, self.vocab, cfg.max_len))
                item_views[hop].append(build_hop_prompt(ih, hop, self.vocab, cfg.max_len))
        return MicroBatch(prompts, targets, user_views, item_views)

    # -- forward ------------------------------------------------------------

    def _negatives(self, role: str) -> torch.Tensor | None:
        snap = self.bank[role].snapshot()
        k = self.cfg.num_negatives
        if snap is not None and k is not None and snap.shape[0] > k:
            snap = snap[np.sort(self.neg_rng.choice(snap.shape[0], size=k, replace=False))]
        return snap

    def forward(self, mb: MicroBatch, push: bool = True) -> LossBreakdown:
        """Loss for one micro-batch; every term is the mean over its examples.

        All contrastive terms read the queue contents as they stood before
        this micro-batch; the new momentum keys are enqueued afterwards (0-hop
        roles, then 2-hop roles).
        """
        B = len(mb.prompts)
        uv, iv = mb.user_views, mb.item_views
        q_in = mb.prompts + uv[2] + iv[2] + uv[1] + iv[1]
        q_out = self.model.encode_sequences(q_in)
        prompt_emb = q_out[:B]
        logits = self.model.item_logits(prompt_emb)
        l0 = loss_ce(logits, mb.targets)
        uq = HopEmbeddings(None, q_out[3 * B:4 * B], q_out[B:2 * B])
        iq = HopEmbeddings(None, q_out[4 * B:5 * B], q_out[2 * B:3 * B])
        with torch.no_grad():
            k_out = self.momentum.encode_sequences(uv[0] + iv[0] + uv[2] + iv[2])
        uk = HopEmbeddings(k_out[:B], None, k_out[2 * B:3 * B])
        ik = HopEmbeddings(k_out[B:2 * B], None, k_out[3 * B:])
        tau = self.weights.tau
        neg = {r: self._negatives(r) for r in ("user0", "item0", "user2", "item2")}
        terms = {
            "l1_user": info_nce_batch(uq.e2, uk.e0, neg["user0"], tau).mean(),
            "l1_item": info_nce_batch(iq.e2, ik.e0, neg["item0"], tau).mean(),
            "l2_user": info_nce_batch(iq.e1, uk.e2, neg["user2"], tau).mean(),
            "l2_item": info_nce_batch(uq.e1, ik.e2, neg["item2"], tau).mean(),
            "l3_user": info_nce_batch(iq.e1, uk.e0, neg["user0"], tau).mean(),
            "l3_item": info_nce_batch(uq.e1, ik.e0, neg["item0"], tau).mean(),
        }
        out = total_loss(l0, terms, self.weights)
        if self.cfg.explicit_l2:
            reg = sum((p * p).sum() for p in self.model.parameters())
            out.total = out.total + self.weights.weight_decay * reg
        if push:
            self.bank["user0"].push(uk.e0)
            self.bank["item0"].push(ik.e0)
            self.bank["user2"].push(uk.e2)
            self.bank["item2"].push(ik.e2)
        return out

    # -- optimisation -------------------------------------------------------

    def train_step(self, examples: Sequence[Example], group_size: int | None = None,
                   epoch: int = 0) -> LossBreakdown:
        """Forward/backward one micro-batch; applies an update once the group is complete."""
        group = group_size or self.cfg.accumulation_steps
        out = self.forward(self.prepare(examples, epoch))
        if not torch.isfinite(out.total):
            raise FloatingPointError(
                f"non-finite loss at step {self.step}: {out.values()} "
                f"(users {[e.user for e in examples]}, targets {[e.target for e in examples]})")
        (out.total / group).backward()
        self._pending.append(out.values())
        if len(self._pending) == group:
            self.apply_update()
        return out

    def apply_update(self) -> dict[str, float]:
        lr = lr_at_step(self.step + 1, self.total_steps, self.cfg)
        if self.cfg.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.clip_norm)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        momentum_update(self.momentum, self.model, self.cfg.m)
        self.step += 1
        n = len(self._pending)
        row = {"step": self.step}
        for name, col in zip(("l0",) + TERMS + ("total",), LOG_COLUMNS[1:-1]):
            row[col] = sum(p[name] for p in self._pending) / n
        row["lr"] = lr
        self._pending = []
        self.log.append(row)
        return row

    def schedule(self, num_examples: int) -> list[int]:
        """Micro-batch counts of each optimizer update in one epoch."""
        micro = math.ceil(num_examples / self.cfg.batch_size)
        acc = self.cfg.accumulation_steps
        return [min(acc, micro - s) for s in range(0, micro, acc)]


@dataclass
class FitResult:
    model: GalRecModel
    best_model: GalRecModel
    best_val_hr10: float
    initial_val_hr10: float
    log: list[dict] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)


def fit(split: SplitDataset, cfg: TrainConfig, user_table: ExternalEmbeddingTable,
        item_table: ExternalEmbeddingTable, model: GalRecModel | None = None) -> FitResult:
    """Fixed-epoch training with best-validation HR@10 model selection."""
    from .evaluation import evaluate

    trainer = Trainer(split, cfg, user_table, item_table, model=model)
    examples = training_examples(split, cfg.augment)
    if not examples:
        raise ValueError("no training examples (every training prefix is shorter than 2)")
    per_epoch = trainer.schedule(len(examples))
    trainer.total_steps = max(1, cfg.epochs * len(per_epoch))
    order_rng = np.random.default_rng([cfg.seed, 1])

    def validate():
        return evaluate(trainer.model, split, cfg, target="val").hr10

    best = initial = validate()
    best_state = copy.deepcopy(trainer.model.state_dict())
    history = [(0, initial)]
    for epoch in range(1, cfg.epochs + 1):
        trainer.model.train()
        order = order_rng.permutation(len(examples))
        micro = [[examples[j] for j in order[s:s + cfg.batch_size]]
                 for s in range(0, len(order), cfg.batch_size)]
        pos = 0
        for group in per_epoch:
            for mb in micro[pos:pos + group]:
                trainer.train_step(mb, group_size=group, epoch=epoch)
            pos += group
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            hr = validate()
            history.append((epoch, hr))
            logger.info("epoch %d: val HR@10 %.4f, loss %.4f", epoch, hr, trainer.log[-1]["total"])
            if hr > best:
                best = hr
                best_state = copy.deepcopy(trainer.model.state_dict())
    best_model = copy.deepcopy(trainer.model)
    best_model.load_state_dict(best_state)
    return FitResult(trainer.model, best_model, best, initial, trainer.log, history)


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
