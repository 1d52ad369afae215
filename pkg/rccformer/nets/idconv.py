"""
rccformer.nets.idconv - Input-dependent deformable convolution and ASAM

IDConv, for a 3×3 kernel set R (|R| = 9, position k = 3·i + j) and dilation d:

    1. Δp = offset_conv(x): 2·|R| channels, channel 2k is Δy and 2k+1 is Δx
    2. sample x at p_0 + d·p_k + Δp_k with bilinear_sample
    3. w_gap = GAP of the samples, one value per (k, channel), k-major
    4. w = Conv1×1(ReLU(BN(Conv1×1(w_gap)))): |R|·C → C → |R|·C, one depthwise
       kernel per image, shared by every spatial location
    5. y = Σ_k w_k ⊙ sample_k, then a 1×1 channel mix

``vanilla`` mode keeps a static depthwise kernel and zero offsets,
``deformable`` learns offsets with a static kernel, ``idconv`` is the full form.
offset_conv starts at zero, so training starts from regular sampling.

ASAM: IDConv → BN → ReLU → 1×1 (C → C/2), three IDConvs at dilations 1, 2, 3
concatenated on channels, then BN → ReLU → 1×1 back to C. No residual.
"""

import logging
from typing import List

import numpy as np

from ..core.errors import ConfigError, ShapeError
from ..core.interfaces import Module
from ..core.nnops import (BatchNorm2d, Conv2d, Conv2dSpec, bilinear_sample,
                          concat_channels, init_weight, pointwise, relu)
from ..core.tensor import Parameter, Tensor, as_tensor
from ..enums import ConvMode

logger = logging.getLogger(__name__)

KERNEL = 3
TAPS = KERNEL * KERNEL
ASAM_DILATIONS = (1, 2, 3)


def kernel_offsets(dilation: int) -> np.ndarray:
    """(|R|, 2) regular-grid (dy, dx) offsets, k = 3·i + j."""
    r = np.arange(KERNEL) - KERNEL // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    grid = np.stack([dy.reshape(-1), dx.reshape(-1)], axis=1).astype(np.float64)
    return dilation * grid


def base_grid(h: int, w: int, dilation: int) -> np.ndarray:
    """(H·W·|R|, 2) sampling positions without offsets, ordered (h, w, k)."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centres = np.stack([yy, xx], axis=-1).astype(np.float64).reshape(h, w, 1, 2)
    return (centres + kernel_offsets(dilation).reshape(1, 1, TAPS, 2)).reshape(-1, 2)


class IDConv(Module):
    """
    3×3 (input-dependent, deformable) depthwise convolution plus a 1×1 mix

    Args:
        channels: C, preserved
        rng: Initialisation generator
        dilation: Grid dilation d (offset_conv uses the same dilation)
        mode: vanilla, deformable or idconv
        bias: Bias on the 1×1 mix
    """

    def __init__(self, channels: int, rng: np.random.Generator, dilation: int = 1,
                 mode: ConvMode = ConvMode.IDCONV, bias: bool = True):
        try:
            self.mode = ConvMode(mode)
        except ValueError:
            raise ConfigError(f"unknown convolution mode '{mode}'") from None
        self.channels = channels
        self.dilation = dilation
        if self.mode != ConvMode.IDCONV:
            self.weight = Parameter(init_weight(rng, (channels, TAPS), TAPS))
        self.mix = pointwise(channels, channels, rng, bias=bias)
        if self.mode != ConvMode.VANILLA:
            spec = Conv2dSpec(channels, 2 * TAPS, (KERNEL, KERNEL), padding=dilation,
                              dilation=dilation)
            self.offset_conv = Conv2d(spec, rng, zero_init=True)
        if self.mode == ConvMode.IDCONV:
            self.wb1 = pointwise(TAPS * channels, channels, rng, bias=False)
            self.wb_norm = BatchNorm2d(channels)
            self.wb2 = pointwise(channels, TAPS * channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return idconv(x, self)

    def offsets(self, x: Tensor) -> Tensor:
        """B×2|R|×H×W offsets (zeros in vanilla mode)."""
        b, _, h, w = x.shape
        if self.mode == ConvMode.VANILLA:
            return Tensor(np.zeros((b, 2 * TAPS, h, w)))
        return self.offset_conv(x)

    def sample(self, x: Tensor) -> Tensor:
        """Deformed samples, B×C×H×W×|R|."""
        b, c, h, w = x.shape
        grid = Tensor(base_grid(h, w, self.dilation).reshape(1, h * w * TAPS, 2))
        if self.mode == ConvMode.VANILLA:
            coords = grid + Tensor(np.zeros((b, 1, 1)))
        else:
            delta = self.offsets(x).reshape(b, TAPS, 2, h, w).transpose(0, 3, 4, 1, 2)
            coords = grid + delta.reshape(b, h * w * TAPS, 2)
        return bilinear_sample(x, coords).reshape(b, c, h, w, TAPS)

    def dynamic_weights(self, samples: Tensor) -> Tensor:
        """Per-image depthwise kernel B×C×|R| from the pooled samples."""
        b, c = samples.shape[:2]
        pooled = samples.mean(axes=(2, 3))                         # B×C×|R|
        w_gap = pooled.transpose(0, 2, 1).reshape(b, TAPS * c, 1, 1)
        hidden = relu(self.wb_norm(self.wb1(w_gap)))
        weights = self.wb2(hidden).reshape(b, TAPS, c)
        return weights.transpose(0, 2, 1)


def idconv(x: Tensor, state: IDConv) -> Tensor:
    """
    Apply IDConv (or its ablation variant, per ``state.mode``)

    Args:
        x: B×C×H×W
        state: IDConv parameters

    Returns:
        B×C×H×W
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"IDConv expects B×{state.channels}×H×W", x.shape)
    b, c, h, w = x.shape
    samples = state.sample(x)
    if state.mode == ConvMode.IDCONV:
        kernel = state.dynamic_weights(samples).reshape(b, c, 1, 1, TAPS)
    else:
        kernel = state.weight.reshape(1, c, 1, 1, TAPS)
    return state.mix((samples * kernel).sum(axes=-1))


def idconv_ablation(x: Tensor, mode, state: IDConv) -> Tensor:
    """Run ``state`` after checking it was built for ``mode``."""
    try:
        mode = ConvMode(mode)
    except ValueError:
        raise ConfigError(f"unknown convolution mode '{mode}'") from None
    if mode != state.mode:
        raise ConfigError(
            f"IDConv built for '{state.mode.value}' cannot run '{mode.value}'"
        )
    return idconv(x, state)


class ASAM(Module):
    """Adaptive scale-aware module over C channels (C even)"""

    def __init__(self, channels: int, rng: np.random.Generator,
                 mode: ConvMode = ConvMode.IDCONV):
        if channels % 2:
            raise ConfigError(f"ASAM halves channels; {channels} is odd")
        half = channels // 2
        self.channels = channels
        self.entry_conv = IDConv(channels, rng, 1, mode, bias=False)
        self.entry_norm = BatchNorm2d(channels)
        self.entry_proj = pointwise(channels, half, rng)
        self.branches: List[IDConv] = [IDConv(half, rng, d, mode, bias=False)
                                       for d in ASAM_DILATIONS]
        self.exit_norm = BatchNorm2d(half * len(ASAM_DILATIONS))
        self.exit_proj = pointwise(half * len(ASAM_DILATIONS), channels, rng)

    def entry(self, f_in: Tensor) -> Tensor:
        return self.entry_proj(relu(self.entry_norm(self.entry_conv(f_in))))

    def branch_features(self, f_in: Tensor) -> Tensor:
        """F_c: the three dilated branches concatenated, B×(3C/2)×H×W."""
        f_m = self.entry(f_in)
        return concat_channels(*[branch(f_m) for branch in self.branches])

    def forward(self, f_in: Tensor) -> Tensor:
        return asam(f_in, self)


def asam(f_in: Tensor, state: ASAM) -> Tensor:
    """ASAM forward; spatial shape and channel count preserved."""
    return state.exit_proj(relu(state.exit_norm(state.branch_features(f_in))))
