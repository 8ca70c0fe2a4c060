import numpy as np
import pytest

from chatabl.task import GenConfig, generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    cfg = GenConfig(min_length=5, max_length=7, per_length=40, labeled_fraction=0.25, glyph_noise=0.05)
    return generate_dataset(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
