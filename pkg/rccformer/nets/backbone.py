"""
rccformer.nets.backbone - Four-stage pyramid vision transformer encoder

A small from-scratch stand-in for a PVTv2-style encoder. Each stage is an
overlapping 3×3 patch embedding (strides 4/2/2/2) followed by transformer blocks
with spatial-reduction attention and a CFFN, then a stage layer norm.

Only the last three stages (strides 8, 16, 32) are exported.
"""

import logging
from typing import List, Tuple

import numpy as np

from ..core.errors import ShapeError
from ..core.interfaces import FeaturePyramid, Module
from ..core.model_config import INPUT_MULTIPLE, PATCH_STRIDES, BackboneConfig
from ..core.nnops import Conv2d, Conv2dSpec, LayerNorm, to_image, to_tokens
from ..core.tensor import Tensor, matmul
from .attention import CFFN, HeadProjections, attend, split_heads

logger = logging.getLogger(__name__)


def required_padding(h: int, w: int, multiple: int = INPUT_MULTIPLE) -> Tuple[int, int]:
    """Bottom/right padding that makes (h, w) divisible by ``multiple``."""
    return (-h) % multiple, (-w) % multiple


class SpatialReductionAttention(HeadProjections):
    """Attention whose keys/values come from a ratio×ratio strided reduction"""

    def __init__(self, channels: int, heads: int, sr_ratio: int,
                 rng: np.random.Generator):
        super().__init__(channels, heads, rng)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            spec = Conv2dSpec(channels, channels, (sr_ratio, sr_ratio), stride=sr_ratio)
            self.sr = Conv2d(spec, rng)
            self.sr_norm = LayerNorm(channels)

    def attend_tokens(self, x: Tensor, h: int, w: int) -> Tensor:
        kv_src = x
        if self.sr_ratio > 1:
            kv_src = self.sr_norm(to_tokens(self.sr(to_image(x, h, w))))
        q = split_heads(matmul(x, self.wq), self.heads)
        k = split_heads(matmul(kv_src, self.wk), self.heads)
        v = split_heads(matmul(kv_src, self.wv), self.heads)
        return self(attend(q, k, v))


class PyramidBlock(Module):
    def __init__(self, channels: int, heads: int, sr_ratio: int, mlp_ratio: int,
                 rng: np.random.Generator):
        self.norm1 = LayerNorm(channels)
        self.attn = SpatialReductionAttention(channels, heads, sr_ratio, rng)
        self.norm2 = LayerNorm(channels)
        self.cffn = CFFN(channels, mlp_ratio, rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn.attend_tokens(self.norm1(x), h, w)
        return x + self.cffn(self.norm2(x), h, w)


class PyramidStage(Module):
    def __init__(self, in_channels: int, channels: int, stride: int, depth: int,
                 heads: int, sr_ratio: int, mlp_ratio: int, rng: np.random.Generator):
        spec = Conv2dSpec(in_channels, channels, (3, 3), stride=stride, padding=1)
        self.patch_embed = Conv2d(spec, rng)
        self.embed_norm = LayerNorm(channels)
        self.blocks = [PyramidBlock(channels, heads, sr_ratio, mlp_ratio, rng)
                       for _ in range(depth)]
        self.norm = LayerNorm(channels)

    def forward(self, x_img: Tensor) -> Tensor:
        x_img = self.patch_embed(x_img)
        _, _, h, w = x_img.shape
        x = self.embed_norm(to_tokens(x_img))
        for block in self.blocks:
            x = block(x, h, w)
        return to_image(self.norm(x), h, w)


class PyramidEncoder(Module):
    """
    Hierarchical encoder emitting {F2, F3, F4}

    Args:
        config: Stage widths, depths, heads and reduction ratios
        rng: Initialisation generator
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator,
                 in_channels: int = 3):
        self.config = config
        self.stages: List[PyramidStage] = []
        previous = in_channels
        for index in range(4):
            channels = config.stage_channels[index]
            self.stages.append(PyramidStage(
                previous, channels, PATCH_STRIDES[index],
                config.stage_depths[index], config.stage_heads[index],
                config.sr_ratios[index], config.mlp_ratio, rng,
            ))
            previous = channels

    @property
    def tap_channels(self) -> Tuple[int, int, int]:
        return tuple(self.config.stage_channels[1:])

    def forward(self, image: Tensor) -> FeaturePyramid:
        return encode(image, self)


def encode(image: Tensor, state: PyramidEncoder) -> FeaturePyramid:
    """
    Run the encoder

    Args:
        image: B×3×H×W, H and W divisible by 32
        state: Encoder parameters

    Returns:
        FeaturePyramid with maps at strides 8, 16, 32
    """
    if image.ndim != 4:
        raise ShapeError("encoder expects a B×3×H×W image", image.shape)
    h, w = image.shape[2:]
    pad_h, pad_w = required_padding(h, w)
    if pad_h or pad_w:
        raise ShapeError(
            f"input {h}×{w} is not divisible by {INPUT_MULTIPLE}; "
            f"pad bottom by {pad_h} and right by {pad_w}", image.shape,
        )
    taps = []
    x = image
    for stage in state.stages:
        x = stage(x)
        taps.append(x)
    return FeaturePyramid(*taps[1:])
