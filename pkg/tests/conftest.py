import numpy as np
import pytest

from vqacoin.data import SyntheticConfig, generate_split
from vqacoin.model import ModelConfig, VqaCoinModel


TINY = dict(d_image=24, d_q_large=6, d_q_small=5, d_si=5, embed_dim=4, d_hidden=3, glimpses_image=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SyntheticConfig(seed=3)
    return generate_split(cfg, "train", 200), generate_split(cfg, "val", 60)


@pytest.fixture(scope="session")
def tiny_examples():
    return generate_split(SyntheticConfig(d_image=24, annotator_noise=0.2, seed=0), "train", 40)


@pytest.fixture
def tiny_model(tiny_examples):
    return VqaCoinModel.build(ModelConfig(**TINY), tiny_examples, min_answer_count=1, seed=0)
