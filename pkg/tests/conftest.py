import numpy as np
import pytest

from app.services.kernel_distance import ClientSample
from app.services.synth import ModelConfig, sample_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_clients():
    """Three Model A clients, small enough for exact solves in milliseconds."""
    return sample_model(ModelConfig(K=3, d=2, m=12, n=12, seed=3))


@pytest.fixture
def shifted_clients():
    """Two clients whose Y side is shifted by 3 in every coordinate."""
    rng = np.random.default_rng(8)
    return [ClientSample.from_arrays(f"c{k}", rng.normal(size=(15, 2)), rng.normal(size=(15, 2)) + 3.0)
            for k in range(2)]
