"""
rccformer.nets - Architecture blocks

- backbone: four-stage pyramid transformer encoder
- mffm: multi-level feature fusion and its ablation variants
- attention: detail-embedded attention, cross-attention and DEAB blocks
- idconv: input-dependent deformable convolution and ASAM
- model: the full density network
"""

from .model import RCCFormer, count, forward

__all__ = ["RCCFormer", "count", "forward"]
