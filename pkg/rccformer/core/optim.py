"""
rccformer.core.optim - AdamW with decoupled weight decay

Update per parameter p with gradient g at step t:
    m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
    p ← p − lr·( m̂/(√v̂ + ε) + wd·p )
    m̂ = m/(1−β1^t),  v̂ = v/(1−β2^t)
"""

from typing import Sequence, Tuple

import numpy as np

from .errors import TrainingDivergedError
from .model_config import OptimizerConfig
from .tensor import Parameter


class AdamW:
    """AdamW over a fixed, ordered parameter list"""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-5,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @classmethod
    def from_config(cls, params: Sequence[Parameter],
                    config: OptimizerConfig) -> "AdamW":
        return cls(params, config.lr, tuple(config.betas), config.eps,
                   config.weight_decay)

    def step(self) -> None:
        """
        One update of every parameter holding a gradient

        Raises:
            TrainingDivergedError: A moment estimate is not finite; parameters
                updated before the failing one keep their new values
        """
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            m = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            with np.errstate(over="ignore"):
                v = self.beta2 * self.v[i] + (1 - self.beta2) * (p.grad ** 2)
            if not (np.isfinite(m).all() and np.isfinite(v).all()):
                raise TrainingDivergedError(
                    f"non-finite AdamW moment for parameter {i} "
                    f"(max |grad| {np.abs(p.grad).max():.3g})"
                )
            self.m[i], self.v[i] = m, v
            m_hat = m / correction1
            v_hat = v / correction2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
