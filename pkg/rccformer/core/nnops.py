"""
rccformer.core.nnops - Neural-network primitives shared by every architecture block

Convolutions, normalisations, resampling, pooling, linear layers and softmax, as
differentiable functions over ``Tensor`` plus thin ``Module`` wrappers that own
the parameters.

Key Features:
- im2col convolution with stride, zero padding, dilation and groups
- Bilinear sampling at fractional (y, x) positions, differentiable w.r.t. the
  image AND the positions
- Separable bilinear upsampling with the half-pixel (align-corners=false) rule
- Numerically stable softmax

Coordinate convention: (0, 0) is the CENTRE of the top-left pixel, y grows down,
x grows right. Taps falling outside the image read zero.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ..enums import NormKind
from .errors import ConfigError, NonFiniteError, RCCError, ShapeError
from .interfaces import Module
from .tensor import Parameter, Tensor, apply_op, as_tensor, concat, gelu, matmul, relu

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5
LN_EPSILON = 1e-6


# =============================================================================
# Specs
# =============================================================================


@dataclass(frozen=True)
class Conv2dSpec:
    """2-D convolution geometry; weights are (out, in/groups, kh, kw)"""
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        kernel = self.kernel
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        object.__setattr__(self, "kernel", tuple(int(k) for k in kernel))
        g = self.groups
        if g < 1 or self.in_channels % g or self.out_channels % g:
            raise ConfigError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible "
                f"by groups {self.groups}"
            )
        if (min(self.kernel) < 1 or self.stride < 1 or self.dilation < 1
                or self.padding < 0):
            raise ConfigError(f"invalid convolution geometry: {self}")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        d, p, s = self.dilation, self.padding, self.stride
        ho = (h + 2 * p - d * (kh - 1) - 1) // s + 1
        wo = (w + 2 * p - d * (kw - 1) - 1) // s + 1
        return ho, wo


@dataclass(frozen=True)
class NormSpec:
    """Normalisation settings"""
    kind: NormKind
    feature_dim: int
    epsilon: float = LN_EPSILON
    affine: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(
                f"normalisation epsilon must be positive, got {self.epsilon}"
            )


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer"""
    running_mean: np.ndarray
    running_var: np.ndarray
    batches_tracked: np.ndarray = field(default_factory=lambda: np.zeros(()))
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels), np.zeros(()), momentum)

    @property
    def initialized(self) -> bool:
        return float(self.batches_tracked) > 0


# =============================================================================
# Convolution
# =============================================================================


def _window(offset: int, count: int, stride: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv2d(x: Tensor, spec: Conv2dSpec, weight: Tensor,
           bias: Optional[Tensor] = None) -> Tensor:
    """
    Cross-correlation with zero padding

    Args:
        x: B×C×H×W input, C == spec.in_channels
        spec: Convolution geometry
        weight: (out, in/groups, kh, kw) kernel
        bias: Optional (out,) bias, used when ``spec.bias``

    Returns:
        B×out×Ho×Wo output, Ho = floor((H + 2p − d·(kh−1) − 1)/s) + 1
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects B×{spec.in_channels}×H×W input", x.shape)
    if weight.shape != spec.weight_shape:
        raise ShapeError("conv2d weight shape mismatch", weight.shape,
                         spec.weight_shape)

    b, c, h, w = x.shape
    kh, kw = spec.kernel
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for kernel {spec.kernel}",
                         x.shape)
    g, p, d, s = spec.groups, spec.padding, spec.dilation, spec.stride
    cg, og = c // g, spec.out_channels // g

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, _window(i * d, ho, s), _window(j * d, wo, s)]
    cols_g = cols.reshape(b, g, cg, kh, kw, ho, wo)
    w_g = weight.data.reshape(g, og, cg, kh, kw)
    out_data = np.einsum("bgcuvhw,gocuv->bgohw", cols_g, w_g, optimize=True)
    out_data = out_data.reshape(b, spec.out_channels, ho, wo)

    inputs = [x, weight]
    if spec.bias:
        if bias is None:
            raise ShapeError("conv2d spec declares a bias but none was given")
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError("conv2d bias shape mismatch", bias.shape,
                             (spec.out_channels,))
        out_data = out_data + bias.data[None, :, None, None]
        inputs.append(bias)

    def backward(grad, needs):
        gg = grad.reshape(b, g, og, ho, wo)
        grads = [None, None, None]
        if needs[0]:
            dcols = np.einsum("bgohw,gocuv->bgcuvhw", gg, w_g, optimize=True)
            dcols = dcols.reshape(b, c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    rows, cols = _window(i * d, ho, s), _window(j * d, wo, s)
                    dxp[:, :, rows, cols] += dcols[:, :, i, j]
            grads[0] = dxp[:, :, p:p + h, p:p + w]
        if needs[1]:
            grads[1] = np.einsum("bgohw,bgcuvhw->gocuv", gg, cols_g,
                                 optimize=True).reshape(spec.weight_shape)
        if len(needs) > 2 and needs[2]:
            grads[2] = grad.sum(axis=(0, 2, 3))
        return grads[:len(needs)]

    return apply_op("conv2d", inputs, out_data, backward)


def depthwise_conv2d(x: Tensor, spec: Conv2dSpec, weight: Tensor,
                     bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel spatial filtering; requires groups == in == out channels."""
    if not spec.groups == spec.in_channels == spec.out_channels:
        raise ConfigError(
            "depthwise convolution needs groups == in == out, "
            f"got groups={spec.groups} "
            f"in={spec.in_channels} out={spec.out_channels}"
        )
    return conv2d(x, spec, weight, bias)


# =============================================================================
# Linear and normalisation
# =============================================================================


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x · W + b`` over the trailing dimension; W is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear: last input dim must equal weight rows", x.shape,
                         weight.shape)
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def layer_norm(x: Tensor, spec: NormSpec, weight: Optional[Tensor] = None,
               bias: Optional[Tensor] = None) -> Tensor:
    """
    Normalise each token over its feature (last) dimension

    ``(x − mean) / sqrt(var + eps)`` with biased variance, then the optional affine.
    """
    x = as_tensor(x)
    if x.shape[-1] != spec.feature_dim:
        raise ShapeError(f"layer_norm expects feature dim {spec.feature_dim}", x.shape)
    centered = x - x.mean(axes=-1, keepdims=True)
    var = (centered * centered).mean(axes=-1, keepdims=True)
    out = centered / (var + spec.epsilon).sqrt()
    if spec.affine and weight is not None:
        out = out * weight + bias
    return out


def batch_norm(x: Tensor, spec: NormSpec, stats: BatchNormStats, training: bool,
               weight: Optional[Tensor] = None,
               bias: Optional[Tensor] = None) -> Tensor:
    """
    Per-channel normalisation over (batch, H, W)

    Training mode normalises with the biased batch statistics and folds them into
    the running statistics with ``stats.momentum``; the first tracked batch
    initialises the running statistics outright. Eval mode uses the running
    statistics and is rejected before any training batch has been seen.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.feature_dim:
        raise ShapeError(f"batch_norm expects B×{spec.feature_dim}×H×W input",
                         x.shape)
    shape = (1, spec.feature_dim, 1, 1)
    if training:
        mean = x.mean(axes=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axes=(0, 2, 3), keepdims=True)
        batch_mean, batch_var = mean.data.reshape(-1), var.data.reshape(-1)
        if stats.initialized:
            m = stats.momentum
            stats.running_mean = (1.0 - m) * stats.running_mean + m * batch_mean
            stats.running_var = (1.0 - m) * stats.running_var + m * batch_var
        else:
            stats.running_mean = batch_mean.copy()
            stats.running_var = batch_var.copy()
        stats.batches_tracked = np.asarray(float(stats.batches_tracked) + 1.0)
        out = centered / (var + spec.epsilon).sqrt()
    else:
        if not stats.initialized:
            raise RCCError("batch_norm in eval mode before any training batch")
        mean = Tensor(stats.running_mean.reshape(shape))
        std = np.sqrt(stats.running_var.reshape(shape) + spec.epsilon)
        out = (x - mean) / Tensor(std)
    if spec.affine and weight is not None:
        out = out * weight.reshape(shape) + bias.reshape(shape)
    return out


# =============================================================================
# Sampling and resampling
# =============================================================================


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """
    Sample ``x`` at fractional positions

    Args:
        x: B×C×H×W image tensor
        coords: B×P×2 (y, x) positions, pixel-centre origin

    Returns:
        B×C×P samples; each is the bilinear blend of the four neighbouring pixels,
        neighbours outside the image contributing zero
    """
    x, coords = as_tensor(x), as_tensor(coords)
    if (x.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2
            or coords.shape[0] != x.shape[0]):
        raise ShapeError("bilinear_sample expects B×C×H×W and B×P×2", x.shape,
                         coords.shape)
    bad = ~np.isfinite(coords.data)
    if bad.any():
        raise NonFiniteError("non-finite sampling position", tuple(np.argwhere(bad)[0]))

    b, c, h, w = x.shape
    ys, xs = coords.data[..., 0], coords.data[..., 1]
    y0, x0 = np.floor(ys), np.floor(xs)
    wy, wx = ys - y0, xs - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    flat = x.data.reshape(b, c, h * w)

    # (dy, dx, weight, d weight / dy, d weight / dx)
    taps = (
        (0, 0, (1 - wy) * (1 - wx), -(1 - wx), -(1 - wy)),
        (0, 1, (1 - wy) * wx, -wx, (1 - wy)),
        (1, 0, wy * (1 - wx), (1 - wx), -wy),
        (1, 1, wy * wx, wx, wy),
    )
    gathered = []
    out_data = np.zeros((b, c, coords.shape[1]))
    for dy, dx, weight, _, _ in taps:
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        index = np.where(valid, yy * w + xx, 0)
        values = np.take_along_axis(flat, index[:, None, :], axis=2) * valid[:, None, :]
        gathered.append((index, valid, values))
        out_data += weight[:, None, :] * values

    def backward(grad, needs):
        dx_img, dcoords = None, None
        if needs[0]:
            dflat = np.zeros_like(flat)
            for (index, valid, _), (_, _, weight, _, _) in zip(gathered, taps):
                contrib = grad * (weight * valid)[:, None, :]
                for bi in range(b):
                    np.add.at(dflat[bi], (slice(None), index[bi]), contrib[bi])
            dx_img = dflat.reshape(x.shape)
        if needs[1]:
            dcoords = np.zeros(coords.shape)
            for (_, _, values), (_, _, _, dwy, dwx) in zip(gathered, taps):
                weighted = (grad * values).sum(axis=1)
                dcoords[..., 0] += weighted * dwy
                dcoords[..., 1] += weighted * dwx
        return [dx_img, dcoords]

    return apply_op("bilinear_sample", (x, coords), out_data, backward)


def interpolation_matrix(size: int, scale: int) -> np.ndarray:
    """
    (size·scale)×size half-pixel bilinear weights

    Output index o samples source position ``(o + 0.5)/scale − 0.5``, clamped to
    ``[0, size − 1]``.
    """
    out = size * scale
    src = np.clip((np.arange(out) + 0.5) / scale - 0.5, 0.0, size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    matrix = np.zeros((out, size))
    np.add.at(matrix, (np.arange(out), i0), 1.0 - frac)
    np.add.at(matrix, (np.arange(out), i1), frac)
    return matrix


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align-corners=false); 1 is identity."""
    if scale < 1 or int(scale) != scale:
        raise ConfigError(f"upsample scale must be a positive integer, got {scale}")
    x = as_tensor(x)
    if scale == 1:
        return x
    _, _, h, w = x.shape
    rows = Tensor(interpolation_matrix(h, scale))
    cols_t = Tensor(interpolation_matrix(w, scale).T)
    return matmul(matmul(rows, x), cols_t)


def global_avg_pool(x: Tensor) -> Tensor:
    """B×C×H×W -> B×C spatial mean."""
    return as_tensor(x).mean(axes=(2, 3))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad, needs):
        return [out_data * (grad - (grad * out_data).sum(axis=axis, keepdims=True))]

    return apply_op("softmax", (x,), out_data, backward)


# =============================================================================
# Layers
# =============================================================================


def init_weight(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled Gaussian, std = 1/sqrt(fan_in)."""
    return rng.standard_normal(shape) / np.sqrt(max(fan_in, 1))


class Conv2d(Module):
    """Convolution layer owning ``weight`` and optional ``bias``"""

    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator,
                 zero_init: bool = False):
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        if zero_init:
            data = np.zeros(spec.weight_shape)
        else:
            data = init_weight(rng, spec.weight_shape, fan_in)
        self.weight = Parameter(data)
        self.bias = Parameter(np.zeros(spec.out_channels)) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


def pointwise(in_channels: int, out_channels: int, rng: np.random.Generator,
              bias: bool = True) -> Conv2d:
    return Conv2d(Conv2dSpec(in_channels, out_channels, (1, 1), bias=bias), rng)


def depthwise(channels: int, kernel: int, rng: np.random.Generator,
              dilation: int = 1) -> Conv2d:
    pad = dilation * (kernel // 2)
    return Conv2d(Conv2dSpec(channels, channels, (kernel, kernel), padding=pad,
                             dilation=dilation, groups=channels), rng)


class Linear(Module):
    """Token-wise affine map, W is (in, out)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        shape = (in_features, out_features)
        self.weight = Parameter(init_weight(rng, shape, in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Per-token normalisation over the trailing feature dimension"""

    def __init__(self, features: int, epsilon: float = LN_EPSILON):
        self.spec = NormSpec(NormKind.LAYER, features, epsilon)
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.spec, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch normalisation with running statistics kept as checkpoint buffers"""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM,
                 epsilon: float = BN_EPSILON):
        self.spec = NormSpec(NormKind.BATCH, channels, epsilon)
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.stats = BatchNormStats.fresh(channels, momentum)

    def buffer_names(self):
        return ("running_mean", "running_var", "batches_tracked")

    @property
    def running_mean(self) -> np.ndarray:
        return self.stats.running_mean

    @running_mean.setter
    def running_mean(self, value: np.ndarray) -> None:
        self.stats.running_mean = value

    @property
    def running_var(self) -> np.ndarray:
        return self.stats.running_var

    @running_var.setter
    def running_var(self, value: np.ndarray) -> None:
        self.stats.running_var = value

    @property
    def batches_tracked(self) -> np.ndarray:
        return self.stats.batches_tracked

    @batches_tracked.setter
    def batches_tracked(self, value: np.ndarray) -> None:
        self.stats.batches_tracked = np.asarray(value, dtype=np.float64).reshape(())

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.spec, self.stats, self.training, self.weight,
                          self.bias)


# =============================================================================
# Layout helpers
# =============================================================================


def to_tokens(x: Tensor) -> Tensor:
    """B×C×H×W -> B×(H·W)×C."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def concat_channels(*images: Tensor) -> Tensor:
    """Concatenate B×C_i×H×W maps along channels."""
    return concat(images, axis=1)


def to_image(tokens: Tensor, h: int, w: int) -> Tensor:
    """B×(H·W)×C -> B×C×H×W."""
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"cannot fold {n} tokens into {h}×{w}", tokens.shape)
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


__all__ = [
    "Conv2dSpec", "NormSpec", "BatchNormStats", "conv2d", "depthwise_conv2d", "linear",
    "layer_norm", "batch_norm", "bilinear_sample", "upsample_bilinear",
    "global_avg_pool", "softmax", "interpolation_matrix", "init_weight", "Conv2d",
    "Linear", "LayerNorm", "BatchNorm2d", "pointwise", "depthwise", "to_tokens",
    "to_image", "concat_channels", "relu", "gelu",
]
