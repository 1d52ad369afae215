import numpy as np
import numpy.testing as npt
import pytest

from rccformer.core.errors import TrainingDivergedError
from rccformer.core.model_config import OptimizerConfig
from rccformer.core.optim import AdamW
from rccformer.core.tensor import Parameter


def test_first_step_moves_by_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    npt.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-5)


def test_weight_decay_is_decoupled():
    p = Parameter(np.array([2.0]))
    p.grad = np.zeros(1)
    AdamW([p], lr=0.1, weight_decay=0.5).step()
    npt.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_parameters_without_gradient_are_skipped():
    p, q = Parameter(np.ones(2)), Parameter(np.ones(2))
    p.grad = np.ones(2)
    opt = AdamW([p, q], lr=0.1)
    opt.step()
    npt.assert_array_equal(q.data, np.ones(2))
    opt.zero_grad()
    assert p.grad is None


def test_minimises_a_quadratic():
    p = Parameter(np.array([3.0, -1.0]))
    opt = AdamW.from_config([p], OptimizerConfig(lr=0.05, weight_decay=0.0))
    for _ in range(500):
        p.grad = 2.0 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.25


def test_overflowing_gradient_raises_and_keeps_state():
    p = Parameter(np.array([1.0, 2.0]))
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([1e200, 1.0])
    with pytest.raises(TrainingDivergedError):
        opt.step()
    npt.assert_array_equal(p.data, [1.0, 2.0])
    npt.assert_array_equal(opt.v[0], [0.0, 0.0])
