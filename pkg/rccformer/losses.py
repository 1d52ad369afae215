"""
rccformer.losses - Distribution-matching counting objective

    L = L_C + λ1·L_OT + λ2·L_TV          (λ1 = 0.1, λ2 = 0.01)

- L_C  = |ΣD' − ΣD|
- L_OT = debiased entropic OT between the normalised grids,
         S(a, b) = OT_ε(a, b) − ½·OT_ε(a, a) − ½·OT_ε(b, b)
         with OT_ε(a, b) = ⟨a, f⟩ + ⟨b, g⟩ from log-domain Sinkhorn potentials
- L_TV = ½·‖D'/ΣD' − D/ΣD‖₁ · ΣD

Grids are normalised as D / (ΣD + 1e-8), identically for prediction and ground
truth. A prediction with no mass is compared as the uniform grid, so only L_C
moves it. The cost is the squared distance between stride-8 cell centres measured
in cells. Images without people contribute L_C only.

The Sinkhorn run is one tape node whose backward unrolls every iteration in
reverse, so the gradient is exactly that of the fixed-iteration computation.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from .core.errors import AnnotationError, ShapeError
from .core.interfaces import DotAnnotation
from .core.model_config import DENSITY_STRIDE, LossConfig
from .core.tensor import Tensor, apply_op, as_tensor, concat

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-200


# =============================================================================
# Ground truth
# =============================================================================


def bin_dots(annotation: DotAnnotation, image_hw: Tuple[int, int],
             stride: int = DENSITY_STRIDE) -> np.ndarray:
    """
    Bin head dots into stride-8 cells

    Args:
        annotation: (x, y) dots
        image_hw: (H, W) of the image the dots belong to

    Returns:
        (ceil(H/8), ceil(W/8)) grid; each dot adds exactly 1 to cell
        (floor(y/8), floor(x/8))
    """
    h, w = image_hw
    grid = np.zeros((-(-h // stride), -(-w // stride)))
    xs, ys = annotation.xs, annotation.ys
    outside = ~((xs >= 0) & (xs < w) & (ys >= 0) & (ys < h))
    if outside.any():
        index = int(np.flatnonzero(outside)[0])
        raise AnnotationError(
            f"dot {index} at ({xs[index]}, {ys[index]}) lies outside {w}×{h}"
        )
    rows = np.floor(ys / stride).astype(np.int64)
    cols = np.floor(xs / stride).astype(np.int64)
    np.add.at(grid, (rows, cols), 1.0)
    return grid


# =============================================================================
# Sinkhorn
# =============================================================================


@lru_cache(maxsize=32)
def _cost_matrix(grid_shape: Tuple[int, int]) -> np.ndarray:
    rows, cols = grid_shape
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    centres = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1).astype(np.float64)
    diff = centres[:, None, :] - centres[None, :, :]
    cost = (diff ** 2).sum(axis=-1)
    cost.setflags(write=False)
    return cost


def cost_matrix(grid_shape: Tuple[int, int]) -> np.ndarray:
    """Squared cell-centre distances in cell units, (rows·cols)², cached read-only."""
    return _cost_matrix(tuple(int(n) for n in grid_shape))


def _logsumexp(values: np.ndarray, axis: int) -> np.ndarray:
    peak = values.max(axis=axis, keepdims=True)
    total = np.exp(values - peak).sum(axis=axis, keepdims=True)
    return (peak + np.log(total)).squeeze(axis)


@dataclass
class SinkhornRun:
    """Potentials of every iteration, kept for the reverse unroll"""
    log_a: np.ndarray
    log_b: np.ndarray
    fs: np.ndarray      # iters × n
    gs: np.ndarray      # iters × m

    @property
    def f(self) -> np.ndarray:
        return self.fs[-1]

    @property
    def g(self) -> np.ndarray:
        return self.gs[-1]


def sinkhorn_potentials(a: np.ndarray, b: np.ndarray, cost: np.ndarray, reg: float,
                        iters: int) -> SinkhornRun:
    """
    Log-domain Sinkhorn with g_0 = 0:

        f_t = −ε·LSE_j(log b_j + (g_{t−1,j} − C_ij)/ε)
        g_t = −ε·LSE_i(log a_i + (f_t,i − C_ij)/ε)
    """
    log_a = np.log(a + LOG_FLOOR)
    log_b = np.log(b + LOG_FLOOR)
    fs = np.empty((iters, a.size))
    gs = np.empty((iters, b.size))
    g = np.zeros(b.size)
    for t in range(iters):
        f = -reg * _logsumexp(log_b[None, :] + (g[None, :] - cost) / reg, axis=1)
        g = -reg * _logsumexp(log_a[:, None] + (f[:, None] - cost) / reg, axis=0)
        fs[t], gs[t] = f, g
    return SinkhornRun(log_a, log_b, fs, gs)


def sinkhorn_plan(a: np.ndarray, b: np.ndarray, cost: np.ndarray, reg: float = 10.0,
                  iters: int = 100) -> np.ndarray:
    """Transport plan P_ij = a_i·b_j·exp((f_i + g_j − C_ij)/ε)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    run = sinkhorn_potentials(a, b, cost, reg, iters)
    return np.exp(run.log_a[:, None] + run.log_b[None, :]
                  + (run.f[:, None] + run.g[None, :] - cost) / reg)


def sinkhorn_cost(a: Tensor, b: Tensor, cost: np.ndarray, reg: float,
                  iters: int) -> Tensor:
    """
    Entropic transport value ⟨a, f⟩ + ⟨b, g⟩ as one differentiable node

    Args:
        a, b: Flat non-negative measures
        cost: len(a)×len(b) cost matrix
        reg: Entropic regularisation ε
        iters: Fixed number of Sinkhorn iterations

    Returns:
        Scalar tensor
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or cost.shape != (a.size, b.size):
        raise ShapeError("sinkhorn_cost expects flat measures matching the cost",
                         a.shape, b.shape, cost.shape)
    run = sinkhorn_potentials(a.data, b.data, cost, reg, iters)
    value = float(a.data @ run.f + b.data @ run.g)

    def backward(grad, needs):
        s = float(np.asarray(grad).reshape(()))
        a_mass = a.data + LOG_FLOOR
        b_mass = b.data + LOG_FLOOR
        # gradients through log a and log b, already divided by a and b
        bar_a = np.zeros(a.size)
        bar_b = np.zeros(b.size)
        g_bar = s * b.data
        for t in range(iters - 1, -1, -1):
            g_prev = run.gs[t - 1] if t > 0 else np.zeros(b.size)
            # through g_t = −ε·LSE_i(log a_i + (f_t,i − C_ij)/ε)
            # q_ij = a_i·k_ij sums to 1 over i
            k = np.exp((run.fs[t][:, None] + run.gs[t][None, :] - cost) / reg)
            k_g = k @ g_bar
            f_bar = (s * a.data if t == iters - 1 else 0.0) - a_mass * k_g
            bar_a -= reg * k_g
            # through f_t = −ε·LSE_j(log b_j + (g_{t−1,j} − C_ij)/ε)
            # p_ij = b_j·k_ij sums to 1 over j
            k = np.exp((run.fs[t][:, None] + g_prev[None, :] - cost) / reg)
            kt_f = k.T @ f_bar
            bar_b -= reg * kt_f
            g_bar = -b_mass * kt_f
        return [s * run.f + bar_a, s * run.g + bar_b]

    return apply_op("sinkhorn", (a, b), np.asarray(value), backward)


# =============================================================================
# Loss terms
# =============================================================================


def _normalize(grid: Tensor, eps: float) -> Tensor:
    return grid / (grid.sum() + eps)


def _normalize_prediction(pred: Tensor, eps: float) -> Tensor:
    """D'/(ΣD' + eps); with ΣD' ≤ eps the prediction is a constant uniform grid."""
    if float(pred.data.sum()) <= eps:
        return Tensor(np.full(pred.shape, 1.0 / pred.size))
    return _normalize(pred, eps)


def counting_loss(pred, gt) -> Tensor:
    """|ΣD' − ΣD|."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError("counting_loss shape mismatch", pred.shape, gt.shape)
    return (pred.sum() - gt.sum()).abs()


def sinkhorn_ot_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """
    Debiased entropic OT between the normalised grids

    Args:
        pred: Predicted rows×cols density grid
        gt: Ground-truth grid of the same shape with positive mass

    Returns:
        Scalar S(â, b̂) ≥ 0, exactly 0 when the grids are identical
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError("sinkhorn_ot_loss expects two equal 2-D grids", pred.shape,
                         gt.shape)
    cost = cost_matrix(pred.shape)
    a = _normalize_prediction(pred, cfg.norm_eps).reshape(-1)
    b = _normalize(gt, cfg.norm_eps).reshape(-1)
    reg, iters = cfg.sinkhorn_reg, cfg.sinkhorn_iters
    cross = sinkhorn_cost(a, b, cost, reg, iters)
    self_a = sinkhorn_cost(a, a, cost, reg, iters)
    self_b = sinkhorn_cost(b, b, cost, reg, iters)
    return cross - 0.5 * self_a - 0.5 * self_b


def tv_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """½·‖D'/ΣD' − D/ΣD‖₁ · ΣD."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError("tv_loss shape mismatch", pred.shape, gt.shape)
    shares = _normalize_prediction(pred, cfg.norm_eps)
    gap = (shares - _normalize(gt, cfg.norm_eps)).abs().sum()
    return gap * (0.5 * float(gt.data.sum()))


def weighted_sum(l_c, l_ot, l_tv, cfg: LossConfig = LossConfig()):
    """L_C + λ1·L_OT + λ2·L_TV."""
    return l_c + cfg.lambda1 * l_ot + cfg.lambda2 * l_tv


@dataclass
class LossBreakdown:
    """Per-term values of one image, for logging"""
    counting: float
    ot: float
    tv: float
    total: float


def image_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """Composite loss of one rows×cols grid pair; L_C only when the image is empty."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    l_c = counting_loss(pred, gt)
    if float(gt.data.sum()) <= 0:
        return l_c
    l_ot = sinkhorn_ot_loss(pred, gt, cfg)
    return weighted_sum(l_c, l_ot, tv_loss(pred, gt, cfg), cfg)


def composite_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """
    Composite counting loss

    Args:
        pred: rows×cols grid, or B×1×rows×cols batch
        gt: Matching ground truth (B×rows×cols also accepted for a batch)

    Returns:
        Scalar; for a batch, the mean of the per-image losses
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.ndim == 2:
        return image_loss(pred, gt, cfg)
    if pred.ndim != 4 or pred.shape[1] != 1:
        raise ShapeError("composite_loss expects a grid or a B×1×h×w batch",
                         pred.shape)
    gt_data = gt.data[:, 0] if gt.ndim == 4 and gt.shape[1] == 1 else gt.data
    if gt_data.shape != (pred.shape[0], *pred.shape[2:]):
        raise ShapeError("composite_loss ground truth does not match", pred.shape,
                         gt.shape)
    terms = [image_loss(pred[i, 0], Tensor(gt_data[i]), cfg).reshape(1)
             for i in range(pred.shape[0])]
    return concat(terms, axis=0).mean()


def loss_breakdown(pred, gt, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Gradient-free per-term values of one grid pair."""
    pred, gt = Tensor(as_tensor(pred).data), as_tensor(gt)
    l_c = counting_loss(pred, gt).item()
    if float(gt.data.sum()) <= 0:
        return LossBreakdown(l_c, 0.0, 0.0, l_c)
    l_ot = sinkhorn_ot_loss(pred, gt, cfg).item()
    l_tv = tv_loss(pred, gt, cfg).item()
    return LossBreakdown(l_c, l_ot, l_tv, weighted_sum(l_c, l_ot, l_tv, cfg))
