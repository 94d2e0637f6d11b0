"""Finite-difference verification of the total-loss gradient.

Autograd gradients of every trainable parameter group are compared with
central differences of the full objective (next-item CE plus the six
hop-alignment terms) on a tiny planted-cluster problem, with the negative
queues frozen so the loss is a pure function of the parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import core_filter, generate_synthetic, leave_one_out_split
from .embeddings import hash_table
from .trainer import TrainConfig, Trainer, training_examples

TOLERANCE = 1e-4


def reference_config(seed: int = 0, **overrides) -> TrainConfig:
    """The small double-precision setup the check runs on by default."""
    base = dict(d1=8, d2=8, num_layers=1, num_heads=2, d_ff=16, max_len=16, max_one_hop=4, min_two_hop=2,
                batch_size=4, lambda1=1.0, lambda2=1.0, lambda3=1.0, dtype="float64", seed=seed,
                synth_users=16, synth_items=10, synth_blocks=2, synth_interactions_per_user=8, synth_p_in=0.8)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class GradientReport:
    errors: dict[str, float] = field(default_factory=dict)  # group -> max relative error
    momentum: dict[str, float] = field(default_factory=dict)  # group -> max |autograd grad|
    sizes: dict[str, int] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance and all(v == 0.0 for v in self.momentum.values())

    def lines(self) -> list[str]:
        out = [f"{g}\tn={self.sizes[g]}\trel_err={e:.3e}" for g, e in self.errors.items()]
        out += [f"momentum.{g}\tmax_abs_grad={v:.3e}" for g, v in self.momentum.items()]
        return out

    def to_json(self) -> str:
        return json.dumps({"tolerance": self.tolerance, "max_error": self.max_error, "passed": self.passed,
                           "groups": self.errors, "momentum_grad": self.momentum}, indent=2, sort_keys=True)


def parameter_group(name: str) -> str:
    """Coarse group label for a model parameter name."""
    parts = name.split(".")
    if parts[0] == "mapper":
        return "mapper"
    if parts[1] in ("token_embeddings", "positional_embeddings"):
        return parts[1]
    block = f"block{parts[2]}"
    kind = {"wq": "attention", "wk": "attention", "wv": "attention", "wo": "attention",
            "ln1": "norm", "ln2": "norm", "ff1": "feedforward", "ff2": "feedforward"}[parts[3]]
    return f"{block}.{kind}"


def _grouped(model: torch.nn.Module, trainable_only: bool = True) -> dict[str, list[tuple[str, torch.nn.Parameter]]]:
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        if p.requires_grad or not trainable_only:
            groups.setdefault(parameter_group(name), []).append((name, p))
    return groups


def _relative_error(auto: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(auto), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(auto - numeric) / scale)


def gradient_check(cfg: TrainConfig | None = None, seed: int = 0, eps: float = 1e-5, warm_batches: int = 2,
                   freeze: bool = False, corrupt_attention: float | None = None) -> GradientReport:
    """Compare autograd and central-difference gradients per parameter group.

    ``freeze`` makes every parameter non-trainable (the report is then empty).
    ``corrupt_attention`` scales the autograd gradient of the attention
    weights by that factor, a fault the check must flag.
    """
    cfg = cfg or reference_config(seed)
    if cfg.torch_dtype != torch.float64:
        raise ValueError("gradient_check needs double precision")
    raw = generate_synthetic(cfg.synth_users, cfg.synth_items, cfg.synth_blocks,
                             cfg.synth_interactions_per_user, cfg.synth_p_in, seed)
    ds, cat = core_filter(raw, cfg.core_k)
    split = leave_one_out_split(ds)
    ut = hash_table("user", cat.user_keys, cfg.d1, cfg.hash_seed)
    it = hash_table("item", cat.item_keys, cfg.d1, cfg.hash_seed)
    trainer = Trainer(split, cfg, ut, it)
    model = trainer.model
    if freeze:
        for p in model.parameters():
            p.requires_grad_(False)

    examples = training_examples(split)
    batches = [examples[i:i + cfg.batch_size] for i in range(0, len(examples), cfg.batch_size)]
    if len(batches) < warm_batches + 1:
        raise ValueError("too few training examples for the gradient check")
    with torch.no_grad():
        for mb in batches[:warm_batches]:
            trainer.forward(trainer.prepare(mb), push=True)
    probe = trainer.prepare(batches[warm_batches])

    def loss() -> torch.Tensor:
        return trainer.forward(probe, push=False).total

    report = GradientReport(tolerance=TOLERANCE)
    groups = _grouped(model)
    if not groups:
        return report

    hooks = []
    if corrupt_attention is not None:
        for g, params in groups.items():
            if g.endswith("attention"):
                hooks += [p.register_hook(lambda grad, s=corrupt_attention: grad * s) for _, p in params]
    # let the momentum copy accept gradients so a leak would be visible
    for p in trainer.momentum.parameters():
        p.requires_grad_(True)
    model.zero_grad(set_to_none=True)
    loss().backward()
    for h in hooks:
        h.remove()
    for g, params in _grouped(trainer.momentum).items():
        grads = [p.grad for _, p in params if p.grad is not None]
        report.momentum[g] = max((float(x.abs().max()) for x in grads), default=0.0)
    for p in trainer.momentum.parameters():
        p.requires_grad_(False)
        p.grad = None

    with torch.no_grad():
        for g, params in groups.items():
            auto, numeric = [], []
            for _, p in params:
                auto.append(p.grad.detach().numpy().ravel().copy() if p.grad is not None
                            else np.zeros(p.numel()))
                flat = p.view(-1)
                num = np.empty(p.numel())
                for j in range(p.numel()):
                    orig = float(flat[j])
                    flat[j] = orig + eps
                    up = float(loss())
                    flat[j] = orig - eps
                    down = float(loss())
                    flat[j] = orig
                    num[j] = (up - down) / (2 * eps)
                numeric.append(num)
            a, n = np.concatenate(auto), np.concatenate(numeric)
            report.errors[g] = _relative_error(a, n)
            report.sizes[g] = a.size
    model.zero_grad(set_to_none=True)
    return report
