import numpy as np
import pytest
import torch

from zoomdesc.dataset.toy import ToyConfig, generate_toy_corpus
from zoomdesc.embedder import build_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    """2 categories x 3 shapes x 10 points x 3 views."""
    return generate_toy_corpus(ToyConfig(n_categories=2, shapes_per_category=3, points_per_shape=10, side=128), 0)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model("tiny", seed=0, d=8, crop_size=16).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
