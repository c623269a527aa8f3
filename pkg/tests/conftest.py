import numpy as np
import pytest

from submoe import ModelConfig, RedundancySpec, capture, gen_synthetic, make_calib


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def dup_model():
    """Two layers of 8 experts forming 4 exact duplicate pairs (i, i+4)."""
    cfg = ModelConfig(d_model=8, d_expert=16, n_layers=2, n_experts=8, top_k=2, seed=3)
    return gen_synthetic(cfg, RedundancySpec(n_distinct=4, noise=0.0))


@pytest.fixture
def small_model():
    cfg = ModelConfig(d_model=8, d_expert=12, n_layers=2, n_experts=6, top_k=2, seed=11)
    return gen_synthetic(cfg, RedundancySpec(n_distinct=6, noise=0.0))


@pytest.fixture
def calib8():
    return make_calib(8, m=64, seed=5)


@pytest.fixture
def dup_trace(dup_model, calib8):
    return capture(dup_model, calib8)
