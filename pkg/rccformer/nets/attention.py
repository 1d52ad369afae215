"""
rccformer.nets.attention - Global, local and detail-embedded attention blocks

Key Features:
- Multi-head global self-attention over spatial tokens, scaled by 1/sqrt(d_h)
- Local attention: an unnormalised convolutional map (1×1 → depthwise k×k → 1×1)
  multiplied elementwise with the value heads
- Detail-embedded attention: global heads plus α·local heads with ONE scalar α
  shared by every head, followed by the output projection W^P
- DEAB: pre-norm residual block of detail-embedded attention and a
  convolutional feed-forward network (CFFN)
- Cross-attention with queries from one token set and keys/values from another

Tokens are B×T×C; per-head tensors are B×N×T×d_h with d_h = C/N.
"""

import logging
from typing import Optional

import numpy as np

from ..core.errors import ConfigError, ShapeError
from ..core.interfaces import Module
from ..core.nnops import (LayerNorm, Linear, depthwise, gelu, init_weight, pointwise,
                          softmax, to_image, to_tokens)
from ..core.tensor import Parameter, Tensor, as_tensor, matmul
from ..enums import AttentionMode

logger = logging.getLogger(__name__)

DEFAULT_LOCAL_KERNEL = 5
DEFAULT_ALPHA = 0.6


# =============================================================================
# Head bookkeeping
# =============================================================================


def split_heads(tokens: Tensor, heads: int) -> Tensor:
    """B×T×C -> B×N×T×d_h."""
    b, t, c = tokens.shape
    if c % heads:
        raise ShapeError(f"{c} channels cannot split into {heads} heads", tokens.shape)
    return tokens.reshape(b, t, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(per_head: Tensor) -> Tensor:
    """B×N×T×d_h -> B×T×C (heads concatenated in order)."""
    b, n, t, dh = per_head.shape
    return per_head.transpose(0, 2, 1, 3).reshape(b, t, n * dh)


def attention_probs(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``softmax(q kᵀ / sqrt(d_h))``, B×N×Tq×Tk."""
    dh = q.shape[-1]
    return softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return matmul(attention_probs(q, k), v)


class HeadProjections(Module):
    """Bias-free C×C projections W^Q, W^K, W^V, W^P"""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if heads < 1 or channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.wq = Parameter(init_weight(rng, (channels, channels), channels))
        self.wk = Parameter(init_weight(rng, (channels, channels), channels))
        self.wv = Parameter(init_weight(rng, (channels, channels), channels))
        self.wp = Parameter(init_weight(rng, (channels, channels), channels))

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def forward(self, per_head: Tensor) -> Tensor:
        """Concatenate heads and apply W^P."""
        return matmul(merge_heads(per_head), self.wp)


# =============================================================================
# Attention operations
# =============================================================================


def global_self_attention(x: Tensor, state: HeadProjections) -> Tensor:
    """
    Per-head global self-attention

    Args:
        x: B×T×C tokens, T ≥ 1
        state: Block holding W^Q, W^K, W^V

    Returns:
        B×N×T×d_h head outputs ``softmax(Q_j K_jᵀ/sqrt(d_h)) V_j``
    """
    x = as_tensor(x)
    if x.shape[1] < 1:
        raise ShapeError("attention needs at least one token", x.shape)
    q = split_heads(matmul(x, state.wq), state.heads)
    k = split_heads(matmul(x, state.wk), state.heads)
    v = split_heads(matmul(x, state.wv), state.heads)
    return attend(q, k, v)


def local_attention_map(x_img: Tensor, state: "DetailEmbeddedAttention") -> Tensor:
    """Conv1×1(DWConvk×k(Conv1×1(X))) as B×N×T×d_h heads, no normalisation."""
    branch = state.local_out(state.local_dw(state.local_in(x_img)))
    return split_heads(to_tokens(branch), state.heads)


def local_attention(x_img: Tensor, state: "DetailEmbeddedAttention") -> Tensor:
    """
    Local attention heads: the convolutional map ⊙ the value heads

    Args:
        x_img: B×C×H×W block input (after layer norm)
        state: Block holding the local branch and W^V

    Returns:
        B×N×(H·W)×d_h
    """
    v = split_heads(matmul(to_tokens(x_img), state.wv), state.heads)
    return local_attention_map(x_img, state) * v


def dea(x: Tensor, h: int, w: int, state: "DetailEmbeddedAttention",
        mode: Optional[AttentionMode] = None) -> Tensor:
    """
    Detail-embedded attention and its ablation variants

    Args:
        x: B×(H·W)×C tokens
        h, w: Spatial extent of the token grid
        state: Block parameters
        mode: ``gsa`` (global heads only), ``gsa_local`` (global heads plus the
            local map as features), ``dea`` (global heads + α·local attention);
            defaults to the block's mode

    Returns:
        B×(H·W)×C tokens after W^P
    """
    mode = AttentionMode(mode) if mode is not None else state.mode
    missing_local = mode != AttentionMode.GSA and not hasattr(state, "local_in")
    if missing_local or (mode == AttentionMode.DEA and not hasattr(state, "alpha")):
        raise ConfigError(
            f"block built for '{state.mode.value}' cannot run '{mode.value}'"
        )
    heads = global_self_attention(x, state)
    if mode == AttentionMode.GSA_LOCAL:
        heads = heads + local_attention_map(to_image(x, h, w), state)
    elif mode == AttentionMode.DEA:
        heads = heads + state.alpha * local_attention(to_image(x, h, w), state)
    return state(heads)


def dea_ablation(x: Tensor, h: int, w: int, state: "DetailEmbeddedAttention",
                 mode) -> Tensor:
    try:
        mode = AttentionMode(mode)
    except ValueError:
        raise ConfigError(f"unknown attention mode '{mode}'") from None
    return dea(x, h, w, state, mode)


def cross_attention(q_src: Tensor, kv_src: Tensor, state: HeadProjections) -> Tensor:
    """
    Multi-head cross-attention

    Args:
        q_src: B×Tq×C query source
        kv_src: B×Tk×C key/value source
        state: W^Q, W^K, W^V, W^P

    Returns:
        B×Tq×C tokens
    """
    q_src, kv_src = as_tensor(q_src), as_tensor(kv_src)
    if q_src.shape[-1] != kv_src.shape[-1] or q_src.shape[-1] != state.channels:
        raise ShapeError("cross_attention channel mismatch", q_src.shape, kv_src.shape)
    q = split_heads(matmul(q_src, state.wq), state.heads)
    k = split_heads(matmul(kv_src, state.wk), state.heads)
    v = split_heads(matmul(kv_src, state.wv), state.heads)
    return state(attend(q, k, v))


# =============================================================================
# Blocks
# =============================================================================


class DetailEmbeddedAttention(HeadProjections):
    """W^Q/K/V/P, the local branch (for gsa_local and dea) and α (for dea)"""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 local_kernel: int = DEFAULT_LOCAL_KERNEL,
                 alpha_init: float = DEFAULT_ALPHA,
                 mode: AttentionMode = AttentionMode.DEA):
        if local_kernel % 2 == 0:
            raise ConfigError(f"local_kernel must be odd, got {local_kernel}")
        super().__init__(channels, heads, rng)
        self.mode = AttentionMode(mode)
        self.local_kernel = local_kernel
        if self.mode != AttentionMode.GSA:
            self.local_in = pointwise(channels, channels, rng)
            self.local_dw = depthwise(channels, local_kernel, rng)
            self.local_out = pointwise(channels, channels, rng)
        if self.mode == AttentionMode.DEA:
            self.alpha = Parameter(np.asarray(float(alpha_init)))

    def attend_tokens(self, x: Tensor, h: int, w: int) -> Tensor:
        return dea(x, h, w, self)


class CrossAttention(HeadProjections):
    """Query/key-value attention between two token sets"""

    def attend_tokens(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        return cross_attention(q_src, kv_src, self)


class CFFN(Module):
    """Pointwise expand → depthwise 3×3 → GELU → pointwise project, on tokens"""

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        hidden = channels * ratio
        self.fc1 = Linear(channels, hidden, rng)
        self.dw = depthwise(hidden, 3, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        hidden = self.dw(to_image(self.fc1(x), h, w))
        return self.fc2(gelu(to_tokens(hidden)))


class DEABlock(Module):
    """
    Detail-embedded attention block

    X̂ = DEA(LN(X)) + X;  X_out = CFFN(LN(X̂)) + X̂
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 local_kernel: int = DEFAULT_LOCAL_KERNEL,
                 alpha_init: float = DEFAULT_ALPHA,
                 mode: AttentionMode = AttentionMode.DEA, cffn_ratio: int = 4):
        self.norm1 = LayerNorm(channels)
        self.dea = DetailEmbeddedAttention(channels, heads, rng, local_kernel,
                                           alpha_init, mode)
        self.norm2 = LayerNorm(channels)
        self.cffn = CFFN(channels, cffn_ratio, rng)

    def forward(self, x_img: Tensor) -> Tensor:
        _, _, h, w = x_img.shape
        x = to_tokens(x_img)
        x = x + self.dea.attend_tokens(self.norm1(x), h, w)
        x = x + self.cffn(self.norm2(x), h, w)
        return to_image(x, h, w)


def deab_block(x_img: Tensor, state: DEABlock) -> Tensor:
    return state(x_img)
