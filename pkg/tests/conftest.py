import numpy as np
import pytest

from genieblue.model import ModelConfig, build_model


@pytest.fixture(scope="session")
def tiny_config():
    """Small enough for finite differences, large enough for quarter placements."""
    return ModelConfig(
        vocab_size=32,
        d_model=16,
        n_layers=4,
        n_heads=2,
        max_seq=16,
        grid_side=3,
        grid_alphabet=4,
        d_vision=8,
        n_vision_heads=2,
    )


@pytest.fixture(scope="session")
def tiny_base(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
