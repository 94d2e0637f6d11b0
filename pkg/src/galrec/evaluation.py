"""Full-ranking HR@K / NDCG@K and hypersphere uniformity analysis of hop embeddings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.stats import gaussian_kde

from .dataset import SplitDataset
from .encoder import GalRecModel, Vocabulary, build_hop_prompt, build_recommendation_prompt
from .graph import build_bipartite_index, sample_item_hops, sample_user_hops

ROLES = ("user0", "user1", "user2", "item0", "item1", "item2")
EVAL_STREAM = 0xE7A1  # keeps evaluation sampling apart from training streams
ANGLE_BINS = 64


@dataclass(frozen=True)
class RankingResult:
    user: int
    rank_of_target: int
    num_candidates: int

    def __post_init__(self):
        if not 1 <= self.rank_of_target <= self.num_candidates:
            raise ValueError(f"rank {self.rank_of_target} outside [1, {self.num_candidates}]")


@dataclass(frozen=True)
class MetricReport:
    hr5: float
    ndcg5: float
    hr10: float
    ndcg10: float
    num_users: int
    mask_seen: bool = True

    def to_json(self) -> dict:
        return {"hr@5": self.hr5, "ndcg@5": self.ndcg5, "hr@10": self.hr10, "ndcg@10": self.ndcg10,
                "users": self.num_users, "mask_seen": self.mask_seen}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def rank_of(scores: np.ndarray, target: int, candidates: np.ndarray | None = None) -> tuple[int, int]:
    """Pessimistic 1-based rank of ``target`` among the candidate items.

    Every other candidate scoring at least as high as the target ranks ahead of it.
    """
    if candidates is None:
        candidates = np.ones(len(scores), dtype=bool)
    if not candidates[target]:
        raise ValueError(f"target item {target} is not among the candidates")
    others = candidates.copy()
    others[target] = False
    ahead = int(np.count_nonzero(scores[others] >= scores[target]))
    return ahead + 1, int(candidates.sum())


def hr_at_k(results: Sequence[RankingResult], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no ranking results")
    ordered = sorted(results, key=lambda r: r.user)
    return math.fsum(1.0 for r in ordered if r.rank_of_target <= k) / len(ordered)


def ndcg_at_k(results: Sequence[RankingResult], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no ranking results")
    ordered = sorted(results, key=lambda r: r.user)
    return math.fsum(1.0 / math.log2(r.rank_of_target + 1) for r in ordered if r.rank_of_target <= k) / len(ordered)


def report(results: Sequence[RankingResult], mask_seen: bool = True) -> MetricReport:
    return MetricReport(hr_at_k(results, 5), ndcg_at_k(results, 5), hr_at_k(results, 10),
                        ndcg_at_k(results, 10), len(results), mask_seen)


def _history_and_target(split: SplitDataset, user: int, target: str):
    if target == "test":
        return split.train[user] + (split.val_target[user],), split.test_target[user]
    if target == "val":
        return split.train[user], split.val_target[user]
    raise ValueError(f"target must be 'val' or 'test', got {target!r}")


def candidate_mask(num_items: int, seen: Sequence[int], target: int, mask_seen: bool) -> np.ndarray:
    """Items eligible for ranking; seen items are dropped except the target itself.

    Keeping the target matters when a user re-consumes an item they already had.
    """
    mask = np.ones(num_items, dtype=bool)
    if mask_seen:
        mask[list(seen)] = False
        mask[target] = True
    return mask


@torch.no_grad()
def score_users(model: GalRecModel, split: SplitDataset, cfg, users: Sequence[int], target: str = "test",
                batch: int = 256) -> np.ndarray:
    """Logits over all items for each user's recommendation prompt."""
    index = build_bipartite_index(split)
    vocab = model.vocab
    out = []
    for start in range(0, len(users), batch):
        prompts = []
        for u in users[start:start + batch]:
            history, tgt = _history_and_target(split, u, target)
            rng = np.random.default_rng([cfg.seed, EVAL_STREAM, u])
            hood = sample_user_hops(index, u, rng, cfg.max_one_hop, cfg.min_two_hop, one_hop=history)
            prompts.append(build_recommendation_prompt(u, hood, vocab, tgt, model.cfg.max_len)[0])
        out.append(model.item_logits(model.encode_sequences(prompts)).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, split.num_items))


def rank_items(user: int, model: GalRecModel, split: SplitDataset, cfg, mask_seen: bool = True,
               target: str = "test") -> RankingResult:
    scores = score_users(model, split, cfg, [user], target)[0]
    history, tgt = _history_and_target(split, user, target)
    rank, n = rank_of(scores, tgt, candidate_mask(split.num_items, history, tgt, mask_seen))
    return RankingResult(user, rank, n)


def evaluate(model: GalRecModel, split: SplitDataset, cfg, target: str = "test",
             mask_seen: bool | None = None) -> MetricReport:
    """Rank every user's held-out item against the full catalog."""
    mask_seen = cfg.mask_seen if mask_seen is None else mask_seen
    was_training = model.training
    model.eval()
    users = list(range(split.num_users))
    scores = score_users(model, split, cfg, users, target)
    results = []
    for u in users:
        history, tgt = _history_and_target(split, u, target)
        rank, n = rank_of(scores[u], tgt, candidate_mask(split.num_items, history, tgt, mask_seen))
        results.append(RankingResult(u, rank, n))
    model.train(was_training)
    return report(results, mask_seen)


# --------------------------------------------------------------------------
# uniformity


def _normalize(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("uniformity is undefined for zero-norm vectors")
    return x / norms


def uniformity_metric(vectors, seed: int = 0, max_exact: int = 200, num_pairs: int = 10_000) -> float:
    """log mean exp(-2 |x - y|^2) over distinct pairs of L2-normalized vectors; lower is more uniform."""
    x = _normalize(vectors)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two vectors")
    if n <= max_exact:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(n, size=num_pairs)
        j = (i + rng.integers(1, n, size=num_pairs)) % n
    sq = np.sum((x[i] - x[j]) ** 2, axis=1)
    return float(np.log(np.mean(np.exp(-2.0 * sq))))


@torch.no_grad()
def hop_embeddings(model: GalRecModel, split: SplitDataset, cfg, batch: int = 256) -> dict[str, np.ndarray]:
    """Pooled 0/1/2-hop views of every user and every item under the training graph."""
    index = build_bipartite_index(split)
    vocab: Vocabulary = model.vocab
    views: dict[str, list] = {r: [] for r in ROLES}
    for side, count, sampler in (("user", split.num_users, sample_user_hops),
                                 ("item", split.num_items, sample_item_hops)):
        for node in range(count):
            rng = np.random.default_rng([cfg.seed, EVAL_STREAM, 1 if side == "user" else 2, node])
            hood = sampler(index, node, rng, cfg.max_one_hop, cfg.min_two_hop)
            if not hood.one_hop:
                continue
            for hop in range(3):
                views[f"{side}{hop}"].append(build_hop_prompt(hood, hop, vocab, model.cfg.max_len))
    out = {}
    for role, seqs in views.items():
        chunks = [model.encode_sequences(seqs[s:s + batch]).cpu().numpy() for s in range(0, len(seqs), batch)]
        out[role] = np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.d2))
    return out


def pca_2d(pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (d, 2) basis of the top-2 principal directions."""
    mean = pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(pooled - mean, full_matrices=False)
    basis = vt[:2].T
    if basis.shape[1] < 2:
        basis = np.pad(basis, ((0, 0), (0, 2 - basis.shape[1])))
    return mean, basis


def angle_density(angles: np.ndarray, bins: int = ANGLE_BINS) -> tuple[np.ndarray, np.ndarray]:
    hist, edges = np.histogram(angles, bins=bins, range=(-math.pi, math.pi), density=True)
    return (edges[:-1] + edges[1:]) / 2, hist


def _kde_grid(points: np.ndarray, lim: float, cells: int) -> np.ndarray:
    axis = np.linspace(-lim, lim, cells)
    gx, gy = np.meshgrid(axis, axis)
    try:
        kde = gaussian_kde(points.T, bw_method="scott")
        z = kde(np.vstack([gx.ravel(), gy.ravel()])).reshape(cells, cells)
    except np.linalg.LinAlgError:
        # degenerate (collapsed) cloud: fall back to a plain 2-d histogram
        z, _, _ = np.histogram2d(points[:, 1], points[:, 0], bins=cells, range=[[-lim, lim], [-lim, lim]])
    return z / z.max() if z.max() > 0 else z


def _svg(panels: Mapping[str, np.ndarray], lim: float, cells: int = 40, size: int = 200) -> str:
    cell = size / cells
    cols = 3
    width, height = cols * (size + 20) + 20, 2 * (size + 40) + 20
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, (role, grid) in enumerate(panels.items()):
        ox = 20 + (k % cols) * (size + 20)
        oy = 30 + (k // cols) * (size + 40)
        parts.append(f'<text x="{ox}" y="{oy - 8}" font-family="sans-serif" font-size="12">{role}</text>')
        parts.append(f'<rect x="{ox}" y="{oy}" width="{size}" height="{size}" fill="none" stroke="#888"/>')
        for r in range(cells):
            for c in range(cells):
                v = float(grid[r, c])
                if v < 0.02:
                    continue
                y = oy + (cells - 1 - r) * cell
                parts.append(f'<rect x="{ox + c * cell:.1f}" y="{y:.1f}" width="{cell:.1f}" '
                             f'height="{cell:.1f}" fill="#1f4e9c" fill-opacity="{v:.3f}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_distribution(samples: Mapping[str, np.ndarray], out_dir, seed: int = 0) -> dict[str, float]:
    """Project every role onto the pooled top-2 principal components and write CSV/SVG/JSON.

    Returns the per-role uniformity scalars.
    """
    for role, vecs in samples.items():
        if len(vecs) < 3:
            raise ValueError(f"role {role} has {len(vecs)} vectors; need at least 3")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in samples.values()])
    mean, basis = pca_2d(pooled)
    projected = {role: (np.asarray(v, dtype=np.float64) - mean) @ basis for role, v in samples.items()}
    lim = max(float(np.abs(p).max()) for p in projected.values()) * 1.05 or 1.0
    panels, uniformity = {}, {}
    for role, pts in projected.items():
        angles = np.arctan2(pts[:, 1], pts[:, 0])
        angles[angles <= -math.pi] = math.pi  # report angles in (-pi, pi]
        with open(out / f"dist_{role}.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("x,y,angle\n")
            for (x, y), a in zip(pts, angles):
                fh.write(f"{float(x)!r},{float(y)!r},{float(a)!r}\n")
        centers, density = angle_density(angles)
        with open(out / f"angles_{role}.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("bin_center,density\n")
            for c, d in zip(centers, density):
                fh.write(f"{float(c)!r},{float(d)!r}\n")
        panels[role] = _kde_grid(pts, lim, 40)
        uniformity[role] = uniformity_metric(samples[role], seed=seed)
    (out / "uniformity.json").write_text(json.dumps(uniformity, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "fig4.svg").write_text(_svg(panels, lim), encoding="utf-8")
    return uniformity
