"""
rccformer.core.gradcheck - Central finite-difference certification of tape gradients

Key Features:
- ``grad_check``: full-tensor comparison for a function of one input
- ``grad_check_parameters``: subsampled comparison over model parameters
- Relative error ``|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)``

Non-scalar function outputs are reduced with a fixed Gaussian projection so every
output element contributes a distinct weight.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError
from .rng import make_rng
from .tensor import Parameter, Tape, Tensor, as_tensor

logger = logging.getLogger(__name__)

MIN_STEP = 1e-6
MAX_STEP = 1e-3
ERROR_FLOOR = 1e-8


@dataclass
class GradcheckResult:
    """Outcome of one certification case"""
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _check_step(step: float) -> None:
    if not MIN_STEP <= step <= MAX_STEP:
        raise ValueError(
            f"finite-difference step must lie in [{MIN_STEP}, {MAX_STEP}], got {step}"
        )


def _finite(value: float, where: Tuple[int, ...]) -> float:
    if not np.isfinite(value):
        raise NonFiniteError("non-finite value during gradient check", where)
    return value


class _Projection:
    """Reduces any output to a scalar with fixed random weights."""

    def __init__(self, seed: int):
        self.seed = seed
        self.weights: Optional[np.ndarray] = None

    def __call__(self, value: Tensor) -> Tensor:
        value = as_tensor(value)
        if value.size == 1:
            return value.sum()
        if self.weights is None or self.weights.shape != value.shape:
            self.weights = make_rng(self.seed).standard_normal(value.shape)
        return (value * self.weights).sum()


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tol: float = 1e-4,
               seed: int = 0) -> float:
    """
    Compare tape gradients of ``f`` at ``x`` with central differences

    Args:
        f: Deterministic tensor function
        x: Input point (copied, never modified)
        step: Finite-difference step in [1e-6, 1e-3]
        tol: Tolerance for the warning log
        seed: Seed of the output projection

    Returns:
        Maximum relative error over all input elements
    """
    _check_step(step)
    base = np.array(as_tensor(x).data, dtype=np.float64)
    projection = _Projection(seed)

    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        root = projection(f(leaf))
    _finite(root.item(), ())
    if root._tape is tape:
        tape.backward(root)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    bad = ~np.isfinite(analytic)
    if bad.any():
        raise NonFiniteError("non-finite analytic gradient", tuple(np.argwhere(bad)[0]))

    numeric = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[index] = base[index] + step
        plus = _finite(projection(f(Tensor(shifted))).item(), index)
        shifted[index] = base[index] - step
        minus = _finite(projection(f(Tensor(shifted))).item(), index)
        numeric[index] = (plus - minus) / (2.0 * step)

    error = relative_error(analytic, numeric)
    if error > tol:
        logger.warning(f"gradient check error {error:.3e} exceeds tolerance {tol:.1e}")
    return error


def grad_check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                          n_samples: int = 50, step: float = 1e-4, tol: float = 1e-3,
                          seed: int = 0, min_grad: float = 1e-6) -> float:
    """
    Subsampled central-difference check over model parameters

    Coordinates are drawn among those whose analytic gradient exceeds ``min_grad``
    in magnitude, so the comparison is not dominated by round-off.

    Args:
        loss_fn: Recomputes the scalar loss from the current parameter values
        params: Parameters to sample
        n_samples: Number of coordinates compared
        step: Finite-difference step in [1e-6, 1e-3]
        tol: Tolerance for the warning log
        seed: Seed of the coordinate sampler
        min_grad: Magnitude threshold for eligible coordinates

    Returns:
        Maximum relative error over the sampled coordinates
    """
    _check_step(step)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    _finite(loss.item(), ())
    tape.backward(loss)

    eligible: List[Tuple[int, int]] = []
    for which, p in enumerate(params):
        if p.grad is None:
            continue
        for flat_index in np.flatnonzero(np.abs(p.grad) > min_grad):
            eligible.append((which, int(flat_index)))
    if not eligible:
        logger.warning("no parameter coordinate has a usable gradient")
        return 0.0

    rng = make_rng(seed)
    picks = rng.choice(len(eligible), size=min(n_samples, len(eligible)), replace=False)
    analytic, numeric = [], []
    for pick in sorted(picks):
        which, flat_index = eligible[pick]
        p = params[which]
        original = p.data.flat[flat_index]
        p.data.flat[flat_index] = original + step
        plus = _finite(loss_fn().item(), (which, flat_index))
        p.data.flat[flat_index] = original - step
        minus = _finite(loss_fn().item(), (which, flat_index))
        p.data.flat[flat_index] = original
        analytic.append(p.grad.flat[flat_index])
        numeric.append((plus - minus) / (2.0 * step))

    error = relative_error(np.array(analytic), np.array(numeric))
    if error > tol:
        logger.warning(f"parameter gradient check error {error:.3e} exceeds "
                       f"tolerance {tol:.1e}")
    return error
