import numpy as np
import pytest

from galrec.dataset import core_filter, generate_synthetic, leave_one_out_split
from galrec.embeddings import hash_table
from galrec.trainer import TrainConfig


def small_config(**overrides) -> TrainConfig:
    base = dict(d1=8, d2=8, num_layers=1, num_heads=2, d_ff=16, max_len=24, max_one_hop=4, min_two_hop=3,
                batch_size=4, accumulation_steps=2, epochs=1, peak_lr=1e-3, m=0.9, dtype="float64",
                synth_users=20, synth_items=10, synth_blocks=2, synth_interactions_per_user=8, synth_p_in=0.8)
    base.update(overrides)
    return TrainConfig(**base)


def make_split(cfg: TrainConfig, seed: int = 0):
    raw = generate_synthetic(cfg.synth_users, cfg.synth_items, cfg.synth_blocks,
                             cfg.synth_interactions_per_user, cfg.synth_p_in, seed)
    ds, cat = core_filter(raw, cfg.core_k)
    return leave_one_out_split(ds), cat


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def split_and_catalog(cfg):
    return make_split(cfg)


@pytest.fixture
def split(split_and_catalog):
    return split_and_catalog[0]


@pytest.fixture
def tables(split_and_catalog, cfg):
    cat = split_and_catalog[1]
    return hash_table("user", cat.user_keys, cfg.d1, 0), hash_table("item", cat.item_keys, cfg.d1, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    rows = getattr(mod, "RESULTS", None)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        terminalreporter.write_line(rows[n])
