import csv
import json
import math

import numpy as np
import pytest

from conftest import make_split, small_config
from galrec.embeddings import hash_table
from galrec.evaluation import (ANGLE_BINS, MetricReport, RankingResult, angle_density, candidate_mask, evaluate,
                               export_distribution, hr_at_k, ndcg_at_k, pca_2d, rank_items, rank_of, report,
                               uniformity_metric)
from galrec.trainer import Trainer


def results(ranks, n=100):
    return [RankingResult(u, r, n) for u, r in enumerate(ranks)]


class TestRanking:
    def test_unique_max(self):
        assert rank_of(np.array([0.1, 0.9, 0.3]), 1) == (1, 3)

    def test_tie_is_pessimistic(self):
        assert rank_of(np.array([0.5, 0.5, 0.1]), 0)[0] == 2
        assert rank_of(np.array([0.5, 0.5, 0.1]), 1)[0] == 2

    def test_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores = np.round(rng.normal(size=20), 1)  # rounding creates ties
            cand = rng.random(20) < 0.7
            target = int(rng.integers(20))
            cand[target] = True
            ids = [i for i in range(20) if cand[i]]
            # stable sort with the target placed after every equal-scoring item
            order = sorted(ids, key=lambda i: (-scores[i], i == target))
            assert rank_of(scores, target, cand) == (order.index(target) + 1, len(ids))

    def test_masked_target(self):
        with pytest.raises(ValueError):
            rank_of(np.zeros(3), 1, np.array([True, False, True]))

    def test_bounds(self):
        with pytest.raises(ValueError):
            RankingResult(0, 0, 5)
        with pytest.raises(ValueError):
            RankingResult(0, 6, 5)


class TestMetrics:
    def test_all_first(self):
        assert hr_at_k(results([1, 1, 1]), 5) == 1.0 and ndcg_at_k(results([1, 1, 1]), 5) == 1.0

    def test_rank_three(self):
        assert ndcg_at_k(results([3]), 5) == 0.5

    def test_direct_sum_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ranks = rng.integers(1, 51, size=int(rng.integers(1, 300)))
            res = results(ranks.tolist(), 50)
            for k in (5, 10):
                hr = sum(1 for r in ranks if r <= k) / len(ranks)
                nd = sum(1 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)
                assert abs(hr_at_k(res, k) - hr) <= 1e-12
                assert abs(ndcg_at_k(res, k) - nd) <= 1e-12
                rep = report(res)
                assert rep.hr10 >= rep.hr5 and rep.ndcg5 <= rep.hr5 and rep.ndcg10 <= rep.hr10

    def test_order_independent(self):
        res = results([1, 4, 9, 2, 30, 7])
        assert ndcg_at_k(res, 10) == ndcg_at_k(res[::-1], 10)

    def test_errors(self):
        with pytest.raises(ValueError):
            hr_at_k([], 5)
        with pytest.raises(ValueError):
            ndcg_at_k(results([1]), 0)

    def test_report_json(self, tmp_path):
        rep = MetricReport(0.5, 0.25, 0.75, 0.3, 4, False)
        rep.write(tmp_path / "m.json")
        assert json.loads((tmp_path / "m.json").read_text()) == {
            "hr@5": 0.5, "ndcg@5": 0.25, "hr@10": 0.75, "ndcg@10": 0.3, "users": 4, "mask_seen": False}


class TestEvaluate:
    def test_mask_excludes_training_items(self, split):
        for u in range(split.num_users):
            seen = split.train[u] + (split.val_target[u],)
            mask = candidate_mask(split.num_items, seen, split.test_target[u], True)
            assert not any(mask[i] for i in split.train[u] if i != split.test_target[u])
            assert mask[split.test_target[u]]

    def test_random_model_near_chance(self):
        cfg = small_config(synth_users=200, synth_items=100, synth_blocks=20, synth_interactions_per_user=10,
                           synth_p_in=0.9, max_len=40)
        split, cat = make_split(cfg, seed=0)
        tabs = (hash_table("user", cat.user_keys, 8, 0), hash_table("item", cat.item_keys, 8, 0))
        model = Trainer(split, cfg, *tabs).model
        rep = evaluate(model, split, cfg)
        ps = []
        for u in range(split.num_users):
            seen = split.train[u] + (split.val_target[u],)
            n = int(candidate_mask(split.num_items, seen, split.test_target[u], True).sum())
            ps.append(min(10, n) / n)
        ps = np.array(ps)
        sigma = math.sqrt(np.sum(ps * (1 - ps))) / len(ps)
        assert abs(rep.hr10 - ps.mean()) <= 3 * sigma
        assert rep.hr10 >= rep.hr5 and rep.ndcg10 <= rep.hr10 and rep.ndcg5 <= rep.hr5

    def test_rank_items_matches_evaluate(self, split, tables, cfg):
        model = Trainer(split, cfg, *tables).model
        rep = evaluate(model, split, cfg, mask_seen=False)
        res = [rank_items(u, model, split, cfg, mask_seen=False) for u in range(split.num_users)]
        assert report(res, False) == rep
        assert all(r.num_candidates == split.num_items for r in res)


class TestUniformity:
    def test_identical_vectors(self):
        assert uniformity_metric(np.ones((5, 3))) == 0.0

    def test_antipodal(self):
        assert uniformity_metric(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(-8.0, abs=1e-12)

    def test_brute_force(self):
        x = np.random.default_rng(2).normal(size=(50, 6))
        u = x / np.linalg.norm(x, axis=1, keepdims=True)
        vals = [math.exp(-2 * np.sum((u[i] - u[j]) ** 2)) for i in range(50) for j in range(i + 1, 50)]
        assert abs(uniformity_metric(x) - math.log(sum(vals) / len(vals))) <= 1e-9

    def test_permutation_and_scale_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 5))
        base = uniformity_metric(x)
        assert abs(uniformity_metric(x[rng.permutation(40)]) - base) <= 1e-12
        assert abs(uniformity_metric(x * rng.uniform(0.1, 10, size=(40, 1))) - base) <= 1e-12

    def test_sampled_pairs_deterministic(self):
        x = np.random.default_rng(4).normal(size=(300, 4))
        assert uniformity_metric(x, seed=5) == uniformity_metric(x, seed=5)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            uniformity_metric(np.array([[0.0, 0.0], [1.0, 0.0]]))


class TestExport:
    def test_pca_is_isometry_on_centered_2d(self):
        pts = np.random.default_rng(5).normal(size=(30, 2))
        pts -= pts.mean(0)
        mean, basis = pca_2d(pts)
        proj = (pts - mean) @ basis
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
        assert np.abs(d0 - d1).max() <= 1e-9

    def test_axis_angles_split_equally(self):
        angles = np.array([0.0, math.pi / 2, math.pi, -math.pi / 2])
        centers, dens = angle_density(angles)
        mass = dens * (2 * math.pi / ANGLE_BINS)
        assert len(centers) == ANGLE_BINS
        nz = mass[mass > 0]
        assert len(nz) == 4 and np.allclose(nz, 0.25)

    def test_files(self, tmp_path):
        rng = np.random.default_rng(6)
        samples = {"user0": rng.normal(size=(7, 4)), "user2": rng.normal(size=(5, 4)), "item1": rng.normal(size=(4, 4))}
        uni = export_distribution(samples, tmp_path)
        for role, vecs in samples.items():
            rows = list(csv.DictReader(open(tmp_path / f"dist_{role}.csv")))
            assert len(rows) == len(vecs) and list(rows[0]) == ["x", "y", "angle"]
            assert all(-math.pi < float(r["angle"]) <= math.pi for r in rows)
            arows = list(csv.DictReader(open(tmp_path / f"angles_{role}.csv")))
            assert len(arows) == ANGLE_BINS and list(arows[0]) == ["bin_center", "density"]
        assert json.loads((tmp_path / "uniformity.json").read_text()) == uni
        svg = (tmp_path / "fig4.svg").read_text()
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")

    def test_too_few(self, tmp_path):
        with pytest.raises(ValueError):
            export_distribution({"user0": np.ones((2, 3))}, tmp_path)
