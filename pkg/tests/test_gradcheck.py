import numpy as np
import pytest

from rccformer.certify import block_cases, model_check, ops_cases, run_suite
from rccformer.core.gradcheck import grad_check, grad_check_parameters, relative_error
from rccformer.core.tensor import Parameter, Tensor, apply_op


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_grad_check_polynomial():
    x = np.array([0.5, -1.5, 2.0])
    assert grad_check(lambda t: (t * t * t).sum(), x) < 1e-6


def test_grad_check_rejects_step_outside_range():
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), np.ones(2), step=1e-2)


def test_grad_check_detects_wrong_gradient():
    def bad_square(t):
        out = apply_op("bad_square", (t,), t.data ** 2, lambda g, needs: [g * t.data])
        return out.sum()

    assert grad_check(bad_square, np.array([1.0, 2.0])) > 0.1


def test_grad_check_parameters_quadratic():
    p = Parameter(np.array([[1.0, -2.0], [0.5, 3.0]]))
    target = Tensor(np.ones((2, 2)))
    def loss():
        return ((p - target) * (p - target)).sum()

    error = grad_check_parameters(loss, [p], n_samples=4)
    assert error < 1e-6


@pytest.mark.parametrize("case", ops_cases(), ids=lambda c: c.name)
def test_ops_suite(case):
    result = case.run()
    assert result.passed, f"{case.name}: {result.error:.3e}"


@pytest.mark.parametrize("case", block_cases(), ids=lambda c: c.name)
def test_blocks_suite(case):
    result = case.run()
    assert result.passed, f"{case.name}: {result.error:.3e}"


def test_asam_block_case_samples_off_the_lattice():
    case = next(c for c in block_cases() if c.name == "asam")
    assert case.x.shape == (1, 8, 6, 6)
    offsets = case.fn.entry_conv.offsets(Tensor(case.x)).data
    assert (np.abs(offsets) > 1e-6).mean() > 0.99
    for branch in case.fn.branches:
        assert np.abs(branch.offset_conv.weight.data).sum() > 0.0


@pytest.mark.slow
def test_model_suite():
    result = model_check()
    assert result.passed, f"model: {result.error:.3e}"


def test_run_suite_reports_every_case():
    results = run_suite("ops")
    assert [r.name for r in results] == [c.name for c in ops_cases()]
