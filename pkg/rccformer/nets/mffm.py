"""
rccformer.nets.mffm - Multi-level feature fusion

Brings {F2, F3, F4} to a common width C_f at stride 8 (per-token linear
projection, then bilinear upsampling by 1, 2, 4) and fuses them:

    F_c = Linear(Concat(F2', F3', F4'))      concat branch, 3·C_f → C_f
    F_a = F2' + F3' + F4'                    add branch
    F_f = CrossAttn(Q = F_c, K = V = F_a)    no residual, no feed-forward

The fusion ablation replaces the last step with one of the simpler variants.
"""

import logging
from typing import Tuple

import numpy as np

from ..core.errors import ConfigError
from ..core.interfaces import FeaturePyramid, Module
from ..core.nnops import Linear, concat_channels, to_image, to_tokens, upsample_bilinear
from ..core.tensor import Tensor
from ..enums import FusionMode
from .attention import CrossAttention

logger = logging.getLogger(__name__)

UPSAMPLE_FACTORS = (1, 2, 4)


class MFFM(Module):
    """
    Fusion state for one mode

    Only the layers the mode uses are created, so every parameter of the block
    takes part in the forward pass.
    """

    def __init__(self, tap_channels: Tuple[int, int, int], channels: int,
                 rng: np.random.Generator, mode: FusionMode = FusionMode.MFFM,
                 heads: int = 4):
        try:
            self.mode = FusionMode(mode)
        except ValueError:
            raise ConfigError(f"unknown fusion mode '{mode}'") from None
        self.channels = channels
        self.proj2 = Linear(tap_channels[0], channels, rng)
        self.proj3 = Linear(tap_channels[1], channels, rng)
        self.proj4 = Linear(tap_channels[2], channels, rng)
        if self.mode != FusionMode.ADD:
            self.concat_linear = Linear(3 * channels, channels, rng)
        if self.mode == FusionMode.CONCAT_ADD_CONCAT:
            self.mix_linear = Linear(2 * channels, channels, rng)
        if self.mode == FusionMode.MFFM:
            self.cross_attn = CrossAttention(channels, heads, rng)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        return fuse_ablation(*unify(pyramid, self), self.mode, self)


def _project(x_img: Tensor, layer: Linear, scale: int) -> Tensor:
    _, _, h, w = x_img.shape
    return upsample_bilinear(to_image(layer(to_tokens(x_img)), h, w), scale)


def unify(pyramid: FeaturePyramid, state: MFFM) -> Tuple[Tensor, Tensor, Tensor]:
    """Project each level to C_f and upsample to stride 8."""
    layers = (state.proj2, state.proj3, state.proj4)
    levels = zip(pyramid.as_tuple(), layers, UPSAMPLE_FACTORS)
    return tuple(_project(x, layer, scale) for x, layer, scale in levels)


def _linear_image(x_img: Tensor, layer: Linear) -> Tensor:
    _, _, h, w = x_img.shape
    return to_image(layer(to_tokens(x_img)), h, w)


def fuse(f2: Tensor, f3: Tensor, f4: Tensor, state: MFFM) -> Tensor:
    """
    Concat branch, add branch, cross-attention

    Args:
        f2, f3, f4: Unified B×C_f×(H/8)×(W/8) maps
        state: MFFM built in ``mffm`` mode

    Returns:
        B×C_f×(H/8)×(W/8) fused map
    """
    _, _, h, w = f2.shape
    f_c = _linear_image(concat_channels(f2, f3, f4), state.concat_linear)
    f_a = f2 + f3 + f4
    fused = state.cross_attn.attend_tokens(to_tokens(f_c), to_tokens(f_a))
    return to_image(fused, h, w)


def fuse_ablation(f2: Tensor, f3: Tensor, f4: Tensor, mode, state: MFFM) -> Tensor:
    """
    Fusion variants: add, concat, concat_add_add, concat_add_concat, mffm

    ``mffm`` is ``fuse``. The state must have been built for ``mode``.
    """
    try:
        mode = FusionMode(mode)
    except ValueError:
        raise ConfigError(f"unknown fusion mode '{mode}'") from None
    needed = {
        FusionMode.ADD: (),
        FusionMode.CONCAT: ("concat_linear",),
        FusionMode.CONCAT_ADD_ADD: ("concat_linear",),
        FusionMode.CONCAT_ADD_CONCAT: ("concat_linear", "mix_linear"),
        FusionMode.MFFM: ("concat_linear", "cross_attn"),
    }[mode]
    if not all(hasattr(state, name) for name in needed):
        raise ConfigError(f"fusion state built for '{state.mode.value}' "
                          f"cannot run '{mode.value}'")

    if mode == FusionMode.MFFM:
        return fuse(f2, f3, f4, state)
    f_a = f2 + f3 + f4
    if mode == FusionMode.ADD:
        return f_a
    f_c = _linear_image(concat_channels(f2, f3, f4), state.concat_linear)
    if mode == FusionMode.CONCAT:
        return f_c
    if mode == FusionMode.CONCAT_ADD_ADD:
        return f_c + f_a
    return _linear_image(concat_channels(f_c, f_a), state.mix_linear)
