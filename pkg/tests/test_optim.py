import numpy as np
import pytest

from ltdistill.autodiff import Tensor, square, tsum
from ltdistill.optim import (
    NonFiniteGradientError,
    OptimConfig,
    Optimizer,
    OptimState,
    opt_step,
)


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    state = OptimState.for_params([p])
    opt_step([p], [np.zeros(2, dtype=np.float32)], state, OptimConfig(kind="sgd", lr=0.1))
    assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))


def test_plain_sgd_definition():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    state = OptimState.for_params([p])
    opt_step([p], [np.array([2.0], dtype=np.float32)], state, OptimConfig(kind="sgd", lr=0.1))
    expected = np.float32(1.0) - np.float32(0.1) * np.float32(2.0)
    assert p.data[0] == expected


def test_momentum_accumulates():
    p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    cfg = OptimConfig(kind="sgd", lr=1.0, momentum=0.5)
    state = OptimState.for_params([p])
    g = np.array([1.0], dtype=np.float32)
    opt_step([p], [g], state, cfg)  # buf=1, p=-1
    opt_step([p], [g], state, cfg)  # buf=1.5, p=-2.5
    assert np.isclose(p.data[0], -2.5)


def test_adam_reduces_quadratic_bowl_within_50_steps():
    target = np.array([0.3, -0.7, 1.2], dtype=np.float32)
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = Optimizer([p], OptimConfig(kind="adam", lr=0.1))

    def loss_value():
        return float(((p.data - target) ** 2).sum())

    first = loss_value()
    for _ in range(50):
        loss = tsum(square(p - target))
        loss.backward()
        opt.step()
        opt.zero_grad()
    assert loss_value() < 0.05 * first


def test_non_finite_gradient_is_distinct_error():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    state = OptimState.for_params([p])
    bad = np.array([np.nan, 1.0], dtype=np.float32)
    with pytest.raises(NonFiniteGradientError):
        opt_step([p], [bad], state, OptimConfig(kind="sgd", lr=0.1))
    # params untouched
    assert np.array_equal(p.data, np.ones(2, dtype=np.float32))


def test_shape_mismatch_rejected():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    state = OptimState.for_params([p])
    with pytest.raises(ValueError, match="shape"):
        opt_step([p], [np.ones(3, dtype=np.float32)], state, OptimConfig(kind="sgd", lr=0.1))


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        OptimConfig(kind="sgd", lr=-1.0).validate()
    with pytest.raises(ValueError):
        OptimConfig(kind="newton", lr=0.1).validate()
