import numpy as np
import pytest

from core.config import TrainConfig
from core.model import JuliaModel
from core.models import SparseTensor
from core.synth import SyntheticSpec, generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow statistical experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def dense_tensor(rng):
    """Every cell of a 3x4x5 tensor with Gaussian values."""
    shape = (3, 4, 5)
    indices = np.array(list(np.ndindex(*shape)), dtype=np.int64)
    return SparseTensor(shape, indices, rng.standard_normal(len(indices)))


@pytest.fixture
def small_model():
    return JuliaModel.initialize((4, 5, 6), 2, 3, seed=0)


@pytest.fixture
def quick_cfg():
    """Short schedule for functional tests."""
    return TrainConfig(
        batch_size=64,
        warmstart_epochs=2,
        ao_max_iters=2,
        max_epochs=5,
        max_restarts=0,
        seed=3,
    )


@pytest.fixture
def mixed_data():
    """Small noiseless tensor with a CP part and a nonlinear part."""
    spec = SyntheticSpec(shape=(8, 9, 10), R_true=2, F_true=2, missing_rate=0.5, seed=5)
    return generate(spec)
