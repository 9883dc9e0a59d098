import numpy as np
import pytest

from ltdistill.data import LongTailSpec, balanced_split, gen_blobs, make_long_tail
from ltdistill.experts import ExpertTrainConfig, train_expert
from ltdistill.nn import ConvNetSpec
from ltdistill.optim import OptimConfig


@pytest.fixture(scope="session")
def tiny_spec():
    return ConvNetSpec(depth=2, width=8, in_shape=(3, 8, 8), num_classes=3)


@pytest.fixture(scope="session")
def tiny_data():
    """Balanced blobs source plus a skewed long-tail split, C=3 at 8x8."""
    source = gen_blobs(3, 48, (3, 8, 8), seed=11)
    test, remainder = balanced_split(source, 8, seed=12)
    train = make_long_tail(remainder, LongTailSpec(3, 36, 6.0, seed=13))
    return train, test


@pytest.fixture(scope="session")
def tiny_expert(tiny_data, tiny_spec):
    train, _ = tiny_data
    cfg = ExpertTrainConfig(
        iterations=80,
        batch_size=24,
        optimizer=OptimConfig(kind="adam", lr=3e-3),
        seed=21,
    )
    return train_expert(train, tiny_spec, cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
