"""
rccformer.core.tensor - Dense float64 tensors with define-by-run reverse-mode autodiff

This module is the numerical foundation every other rccformer module builds on.

Key Features:
- ``Tensor``: contiguous float64 storage with an optional same-shape gradient buffer
- ``Tape``: ordered record of primitive applications, rebuilt on every forward pass
- ``Parameter``: named, trainable leaf tensor
- A fixed set of differentiable primitives (``Primitive``) with numpy-style
  broadcasting, plus ``apply_op`` for composite kernels (convolution, sampling,
  Sinkhorn) that supply their own backward rule

Recording rule: an operation is recorded when a tape is active in the current
context AND at least one input is tracked (a ``requires_grad`` leaf or the output
of a node on that same tape). With no active tape every operation is a plain
numpy computation, which is how gradient-free evaluation runs.

Backward walks the tape in strict reverse recording order. Leaf gradients are
ACCUMULATED, so calling backward twice without ``zero_grad`` doubles them.
"""

import contextvars
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, RCCError, ShapeError

logger = logging.getLogger(__name__)

GELU_SCALE = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC = 0.044715

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "rccformer_active_tape", default=None
)


class Primitive(Enum):
    """Primitive operations with built-in backward rules"""
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    CONCAT = "concat"
    SPLIT = "split"
    GETITEM = "getitem"
    PAD = "pad"
    EXP = "exp"
    LOG = "log"
    SQRT = "sqrt"
    ABS = "abs"
    RELU = "relu"
    GELU = "gelu"
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    BROADCAST = "broadcast"


@dataclass
class Node:
    """One recorded operation: ``output = op(*inputs)``"""
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    needs: Tuple[bool, ...]
    backward: BackwardFn


class Tape:
    """
    Ordered record of the operations of one forward pass

    Use as a context manager; operations executed inside the ``with`` block are
    recorded on this tape. Topological order is recording order.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, tensor: "Tensor") -> bool:
        """Whether gradients would flow into ``tensor`` from this tape."""
        recorded = tensor._tape is self and tensor.tape_id is not None
        return tensor.requires_grad or recorded

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor",
               backward: BackwardFn) -> int:
        """Append a node for ``output`` and attach ``output`` to this tape."""
        needs = tuple(self.tracks(t) for t in inputs)
        output.tape_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(op, inputs, output, needs, backward))
        return output.tape_id

    def backward(self, root: "Tensor") -> None:
        """
        Populate leaf gradients with d(root)/d(leaf)

        Args:
            root: Single-element tensor recorded on this tape
        """
        if root.data.size != 1:
            raise ShapeError("backward requires a scalar root", root.shape)
        if root._tape is not self or root.tape_id is None:
            raise RCCError("backward root is not attached to this tape")

        pending = {root.tape_id: np.ones_like(root.data)}
        for index in range(root.tape_id, -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            node = self.nodes[index]
            input_grads = node.backward(grad, node.needs)
            for tensor, needed, input_grad in zip(node.inputs, node.needs, input_grads):
                if not needed or input_grad is None:
                    continue
                if input_grad.shape != tensor.shape:
                    raise ShapeError(f"gradient of '{node.op}' has wrong shape",
                                     input_grad.shape, tensor.shape)
                if tensor._tape is self and tensor.tape_id is not None:
                    key = tensor.tape_id
                    if key in pending:
                        pending[key] = pending[key] + input_grad
                    else:
                        pending[key] = input_grad
                elif tensor.requires_grad:
                    if tensor.grad is None:
                        tensor.grad = input_grad.copy()
                    else:
                        tensor.grad = tensor.grad + input_grad


def active_tape() -> Optional[Tape]:
    """The tape recording in the current context, if any."""
    return _ACTIVE_TAPE.get()


class Tensor:
    """
    Dense n-dimensional float64 array participating in the gradient tape

    Image tensors use (batch, channel, height, width) order; token tensors use
    (batch, tokens, channels).
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Copy that is not attached to any tape and never receives gradients."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RCCError("tensor is not attached to a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False) -> "Tensor":
        return tmax(self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return tabs(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a dotted name path such as ``deab.0.dea.wq``"""

    def __init__(self, data: ArrayLike, name: str = "", requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


# =============================================================================
# Recording helpers
# =============================================================================

def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    return value if isinstance(value, Tensor) else Tensor(value)


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward: BackwardFn) -> Tensor:
    """
    Wrap ``out_data`` as the result of ``op`` and record it when required

    Args:
        op: Operation name, kept on the node for diagnostics
        inputs: Tensors the result depends on
        out_data: Forward result
        backward: ``(grad_out, needs) -> [grad per input or None]``

    Returns:
        Result tensor, attached to the active tape if any input is tracked
    """
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, tuple(inputs), out, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands cannot be broadcast together",
                         a.shape, b.shape) from None


def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    if not keepdims:
        grad = grad.reshape([1 if i in axes else n for i, n in enumerate(shape)])
    return np.broadcast_to(grad, shape)


# =============================================================================
# Elementwise primitives
# =============================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g, needs):
        return [unbroadcast(g, a.shape), unbroadcast(g, b.shape)]

    return apply_op("add", (a, b), a.data + b.data, backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g, needs):
        return [unbroadcast(g, a.shape), unbroadcast(-g, b.shape)]

    return apply_op("sub", (a, b), a.data - b.data, backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g, needs):
        return [
            unbroadcast(g * b.data, a.shape) if needs[0] else None,
            unbroadcast(g * a.data, b.shape) if needs[1] else None,
        ]

    return apply_op("mul", (a, b), a.data * b.data, backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out_data = a.data / b.data

    def backward(g, needs):
        return [
            unbroadcast(g / b.data, a.shape) if needs[0] else None,
            unbroadcast(-g * out_data / b.data, b.shape) if needs[1] else None,
        ]

    return apply_op("div", (a, b), out_data, backward)


def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("neg", (x,), -x.data, lambda g, needs: [-g])


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return apply_op("exp", (x,), out_data, lambda g, needs: [g * out_data])


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return apply_op("log", (x,), np.log(x.data), lambda g, needs: [g / x.data])


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt: argument must be non-negative")
    out_data = np.sqrt(x.data)
    return apply_op("sqrt", (x,), out_data, lambda g, needs: [g / (2.0 * out_data)])


def tabs(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("abs", (x,), np.abs(x.data), lambda g, needs: [g * np.sign(x.data)])


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)
    return apply_op("relu", (x,), out_data, lambda g, needs: [g * mask])


def gelu(x: ArrayLike) -> Tensor:
    """GELU, tanh form: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = as_tensor(x)
    inner = GELU_SCALE * (x.data + GELU_CUBIC * x.data ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g, needs):
        d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x.data ** 2)
        return [g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner)]

    return apply_op("gelu", (x,), out_data, backward)


# =============================================================================
# Linear algebra and shape primitives
# =============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes; batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: inner dimensions do not match", a.shape, b.shape)
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul: batch dimensions do not broadcast",
                         a.shape, b.shape) from None

    def backward(g, needs):
        grad_a = grad_b = None
        if needs[0]:
            grad_a = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            grad_b = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return [grad_a, grad_b]

    return apply_op("matmul", (a, b), out_data, backward)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid permutation {axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", (x,), np.transpose(x.data, axes),
                    lambda g, needs: [np.transpose(g, inverse)])


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape to {tuple(shape)}",
                         x.shape) from None
    return apply_op("reshape", (x,), out_data, lambda g, needs: [g.reshape(x.shape)])


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = np.array(np.broadcast_to(x.data, tuple(shape)))
    except ValueError:
        raise ShapeError("broadcast: cannot broadcast", x.shape, tuple(shape)) from None
    return apply_op("broadcast", (x,), out_data,
                    lambda g, needs: [unbroadcast(g, x.shape)])


def concat(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: shapes disagree off the concat axis",
                         *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g, needs):
        return np.split(g, bounds, axis=axis)

    return apply_op("concat", tensors, out_data, backward)


def getitem(x: ArrayLike, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    out_data = np.array(x.data[index])

    def backward(g, needs):
        full = np.zeros_like(x.data)
        full[index] += g
        return [full]

    return apply_op("getitem", (x,), out_data, backward)


def split(x: ArrayLike, sections: Union[int, Sequence[int]],
          axis: int = 0) -> List[Tensor]:
    """Split into ``sections`` equal parts, or parts of the given sizes."""
    x = as_tensor(x)
    extent = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or extent % sections:
            raise ShapeError(
                f"split: axis {axis} of extent {extent} not divisible by {sections}",
                x.shape,
            )
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ShapeError(f"split: sizes {sizes} do not cover extent {extent}",
                             x.shape)
    pieces, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        pieces.append(getitem(x, tuple(index)))
        start += size
    return pieces


def pad(x: ArrayLike, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding with per-axis (before, after) widths."""
    x = as_tensor(x)
    widths = tuple((int(a), int(b)) for a, b in widths)
    index = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return apply_op("pad", (x,), np.pad(x.data, widths), lambda g, needs: [g[index]])


# =============================================================================
# Reductions
# =============================================================================

def tsum(x: ArrayLike, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g, needs):
        return [np.array(_expand_reduced(g, x.shape, axes, keepdims))]

    return apply_op("sum", (x,), out_data, backward)


def tmean(x: ArrayLike, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g, needs):
        return [_expand_reduced(g, x.shape, axes, keepdims) / count]

    return apply_op("mean", (x,), out_data, backward)


def tmax(x: ArrayLike, axes=None, keepdims: bool = False) -> Tensor:
    """Maximum; ties share the incoming gradient equally."""
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    peak = x.data.max(axis=axes, keepdims=True)
    kept = [n for i, n in enumerate(x.shape) if i not in axes]
    out_data = peak if keepdims else peak.reshape(kept)

    def backward(g, needs):
        mask = (x.data == peak).astype(np.float64)
        mask /= mask.sum(axis=axes, keepdims=True)
        return [_expand_reduced(g, x.shape, axes, keepdims) * mask]

    return apply_op("max", (x,), np.array(out_data), backward)


# =============================================================================
# Dispatch
# =============================================================================

_PRIMITIVES = {
    Primitive.ADD: add,
    Primitive.SUB: sub,
    Primitive.MUL: mul,
    Primitive.DIV: div,
    Primitive.NEG: neg,
    Primitive.MATMUL: matmul,
    Primitive.TRANSPOSE: transpose,
    Primitive.RESHAPE: reshape,
    Primitive.CONCAT: lambda *tensors, axis=0: concat(tensors, axis=axis),
    Primitive.SPLIT: split,
    Primitive.GETITEM: getitem,
    Primitive.PAD: pad,
    Primitive.EXP: exp,
    Primitive.LOG: log,
    Primitive.SQRT: sqrt,
    Primitive.ABS: tabs,
    Primitive.RELU: relu,
    Primitive.GELU: gelu,
    Primitive.SUM: tsum,
    Primitive.MEAN: tmean,
    Primitive.MAX: tmax,
    Primitive.BROADCAST: broadcast_to,
}


def forward_primitive(op: Union[Primitive, str], *inputs, **kwargs):
    """
    Apply a primitive by id

    Args:
        op: ``Primitive`` member or its string value (e.g. ``"matmul"``)
        *inputs: Operand tensors followed by positional options (axes, shape...)
        **kwargs: Keyword options of the primitive (``axis``, ``keepdims``...)

    Returns:
        Result tensor (a list of tensors for ``split``)
    """
    try:
        primitive = Primitive(op) if not isinstance(op, Primitive) else op
    except ValueError:
        raise RCCError(f"unknown primitive '{op}'") from None
    return _PRIMITIVES[primitive](*inputs, **kwargs)
