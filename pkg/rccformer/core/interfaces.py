"""
rccformer.core.interfaces - Base interfaces and shared data structures

This module defines the abstractions every architecture block builds on and the
plain data records passed between the model, the losses, the metrics and the
dataset layer.

Key Design Principles:
- Parameters are discovered from attributes, never registered by hand
- Dotted parameter names follow attribute paths (``deab.0.dea.wq``)
- Buffers (normalisation statistics) travel with parameters in checkpoints
- Records are plain dataclasses that serialise without custom encoders
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import Parameter, Tensor

# =============================================================================
# Data Structures
# =============================================================================


@dataclass
class FeaturePyramid:
    """
    Backbone tap points

    ``f2``/``f3``/``f4`` are image tensors at strides 8, 16 and 32.
    """
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def as_tuple(self) -> Tuple[Tensor, Tensor, Tensor]:
        return self.f2, self.f3, self.f4


@dataclass
class DensityMap:
    """
    Non-negative people-per-cell grid at one eighth of the input resolution

    ``grid`` has shape B×1×(H/8)×(W/8); the count of image b is the sum of its grid.
    """
    grid: Tensor

    @property
    def counts(self) -> np.ndarray:
        """Per-image counts, shape (B,)."""
        return self.grid.data.sum(axis=(1, 2, 3))

    @property
    def count(self) -> float:
        """Total count over the batch (the image count when B == 1)."""
        return float(self.grid.data.sum())


@dataclass
class DotAnnotation:
    """
    Head-centre annotations in zero-indexed pixel coordinates

    ``dots`` is an (N, 2) float array of (x, y) pairs; the coordinate (0, 0) is the
    centre of the top-left pixel.
    """
    dots: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.dots = np.asarray(self.dots, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return int(self.dots.shape[0])

    @property
    def xs(self) -> np.ndarray:
        return self.dots[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.dots[:, 1]


@dataclass
class EvalRecord:
    """One evaluated image: predicted count vs ground-truth count"""
    image_id: str
    pred: float
    gt: int
    level: Optional[str] = None

    def __post_init__(self):
        if self.gt < 0:
            raise ValueError(f"ground-truth count must be non-negative, got {self.gt}")


# =============================================================================
# Base Interfaces
# =============================================================================


class Module(ABC):
    """
    Base class for every architecture block

    Child modules, lists of child modules and ``Parameter`` attributes are found
    by walking ``vars(self)`` in assignment order, which fixes parameter order and
    naming for optimisers and checkpoints.
    """

    training: bool = True

    @abstractmethod
    def forward(self, *args, **kwargs):
        """Compute the block output."""
        pass

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal ---------------------------------------------------------

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        """
        Yield ``(dotted_name, parameter)`` pairs

        Also stamps each parameter's ``name`` with its path.
        """
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                full = f"{prefix}{name}"
                value.name = full
                yield full, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def buffer_names(self) -> Tuple[str, ...]:
        """Attributes holding non-trainable arrays saved with the weights."""
        return ()

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names():
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    # -- mode and gradients ------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, dtype=np.float64, copy=True)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray],
                        strict: bool = True) -> None:
        """
        Copy arrays into parameters and buffers by name

        Args:
            state: Mapping of dotted names to arrays
            strict: Reject missing or unexpected names
        """
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            if missing or unexpected:
                raise CheckpointError(
                    f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
                )
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if name in params:
                if value.shape != params[name].shape:
                    raise ShapeError(f"parameter '{name}' shape mismatch",
                                     value.shape, params[name].shape)
                params[name].data = np.ascontiguousarray(value.copy())
            elif name in buffers:
                self._set_buffer(name, value)

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        owner: Module = self
        *path, leaf = dotted.split(".")
        index = 0
        while index < len(path):
            attr = getattr(owner, path[index])
            if isinstance(attr, (list, tuple)):
                attr = attr[int(path[index + 1])]
                index += 1
            owner = attr
            index += 1
        current = getattr(owner, leaf)
        if np.shape(current) != value.shape:
            raise ShapeError(f"buffer '{dotted}' shape mismatch", value.shape,
                             np.shape(current))
        setattr(owner, leaf, value.copy())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))
