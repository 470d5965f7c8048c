import numpy as np
import pytest

from weakground import scenes
from weakground.config import from_dict


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return scenes.generate(99, 24, image_size=64,
                           split_fractions=(0.5, 0.25, 0.25))


@pytest.fixture(scope="session")
def tiny_config():
    # smallest legal geometry: 32px images give a 1-cell box grid
    return from_dict({
        "data": {"image_size": 32, "count": 10,
                 "split_fractions": [0.8, 0.0, 0.2], "seed": 7},
        "feature_dim": 8, "text_dim": 8, "contrast_dim": 8, "aspp_channels": 4,
        "batch_size": 4, "top_k": 1, "epochs": 2, "pretrain_epochs": 1,
        "precision": "float64",
    })


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    d = tiny_config.data
    return scenes.generate(d.seed, d.count, image_size=d.image_size,
                           split_fractions=d.split_fractions)
