"""
rccformer.nets.model - Full density-estimation network

backbone → MFFM → DEAB × depth → ASAM → 1×1 head → ReLU (+ head_epsilon)

The baseline configuration (``use_mffm`` off) upsamples F4 to stride 8 and feeds
it straight to the head. The head is always named ``head`` so parameter names
of a smaller configuration are a subset of the names of a larger one.
"""

import logging
from typing import Optional

import numpy as np

from ..core.interfaces import DensityMap, Module
from ..core.model_config import ModelConfig
from ..core.nnops import pointwise, relu, upsample_bilinear
from ..core.rng import child_rng
from ..core.tensor import Tensor, as_tensor
from .attention import DEABlock
from .backbone import PyramidEncoder
from .idconv import ASAM
from .mffm import MFFM

logger = logging.getLogger(__name__)

BASELINE_UPSAMPLE = 4


class RCCFormer(Module):
    """
    Crowd-counting network

    Args:
        config: Architecture and ablation toggles
        rng: Initialisation generator; every parameter is drawn from it in
            construction order
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.backbone = PyramidEncoder(config.backbone, rng)
        width = config.backbone.stage_channels[-1]
        if config.use_mffm:
            width = config.fusion_channels
            self.mffm = MFFM(self.backbone.tap_channels, width, rng,
                             config.fusion_mode, config.mffm_heads)
        if config.use_deab:
            self.deab = [
                DEABlock(width, config.attention_heads, rng, config.local_kernel,
                         config.alpha_init, config.attention_mode, config.cffn_ratio)
                for _ in range(config.deab_depth)
            ]
        if config.use_asam:
            self.asam = ASAM(width, rng, config.conv_mode)
        self.head = pointwise(width, 1, rng)
        logger.info(f"Built RCCFormer with {self.num_parameters()} parameters")

    @classmethod
    def from_seed(cls, config: ModelConfig, seed: int) -> "RCCFormer":
        return cls(config, child_rng(seed, 0))

    def features(self, image: Tensor) -> Tensor:
        """Stride-8 feature map fed to the head."""
        pyramid = self.backbone(as_tensor(image))
        if not self.config.use_mffm:
            return upsample_bilinear(pyramid.f4, BASELINE_UPSAMPLE)
        x = self.mffm(pyramid)
        for block in getattr(self, "deab", []):
            x = block(x)
        if self.config.use_asam:
            x = self.asam(x)
        return x

    def forward(self, image: Tensor) -> DensityMap:
        return forward(image, self)


def forward(image: Tensor, model: RCCFormer) -> DensityMap:
    """
    Predict a density map

    Args:
        image: B×3×H×W, H and W divisible by 32
        model: Network parameters and configuration

    Returns:
        DensityMap with a B×1×(H/8)×(W/8) non-negative grid
    """
    grid = relu(model.head(model.features(image)))
    if model.config.head_epsilon:
        grid = grid + model.config.head_epsilon
    return DensityMap(grid)


def count(dm: DensityMap, index: Optional[int] = None) -> float:
    """Predicted count: the grid sum (of one image when ``index`` is given)."""
    if index is None:
        return dm.count
    return float(dm.counts[index])
