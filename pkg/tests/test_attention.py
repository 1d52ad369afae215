import numpy as np
import numpy.testing as npt
import pytest

from rccformer.core.errors import ConfigError, ShapeError
from rccformer.core.model_config import ModelConfig
from rccformer.core.tensor import Tape, Tensor
from rccformer.enums import AttentionMode
from rccformer.nets.attention import (DEFAULT_ALPHA, CrossAttention, DEABlock,
                                      DetailEmbeddedAttention, attention_probs,
                                      cross_attention, dea, dea_ablation,
                                      local_attention, local_attention_map, merge_heads,
                                      split_heads)

C, HEADS, H, W = 8, 2, 3, 4


def tokens(rng, b=2, t=H * W):
    return Tensor(rng.standard_normal((b, t, C)))


def test_split_and_merge_heads_are_inverse(rng):
    x = tokens(rng)
    per_head = split_heads(x, HEADS)
    assert per_head.shape == (2, HEADS, H * W, C // HEADS)
    npt.assert_array_equal(merge_heads(per_head).data, x.data)
    with pytest.raises(ShapeError):
        split_heads(x, 3)


def test_attention_rows_are_distributions(rng):
    q = Tensor(rng.standard_normal((1, 2, 5, 4)))
    k = Tensor(rng.standard_normal((1, 2, 7, 4)))
    probs = attention_probs(q, k).data
    assert probs.shape == (1, 2, 5, 7)
    assert (probs >= 0).all()
    npt.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_dea_with_zero_alpha_is_global_attention(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng, alpha_init=0.0)
    x = tokens(rng)
    gsa = dea(x, H, W, state, AttentionMode.GSA)
    npt.assert_allclose(dea(x, H, W, state).data, gsa.data)


def test_local_branch_changes_output(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng)
    x = tokens(rng)
    gsa = dea(x, H, W, state, AttentionMode.GSA)
    assert not np.allclose(dea(x, H, W, state).data, gsa.data)


def test_alpha_is_trained(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng)
    weights = rng.standard_normal((2, H * W, C))
    with Tape() as tape:
        loss = (dea(tokens(rng), H, W, state) * weights).sum()
    tape.backward(loss)
    assert state.alpha.grad is not None
    assert abs(float(state.alpha.grad)) > 0.0


def test_alpha_default():
    assert DEFAULT_ALPHA == 0.6
    assert ModelConfig().alpha_init == 0.6


def test_gsa_block_has_no_local_branch(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng, mode=AttentionMode.GSA)
    names = {name for name, _ in state.named_parameters()}
    assert names == {"wq", "wk", "wv", "wp"}
    with pytest.raises(ConfigError):
        dea(tokens(rng), H, W, state, AttentionMode.DEA)


def test_dea_ablation_modes(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng)
    x = tokens(rng)
    for mode in AttentionMode:
        assert dea_ablation(x, H, W, state, mode.value).shape == x.shape
    with pytest.raises(ConfigError):
        dea_ablation(x, H, W, state, "dilated")


def test_even_local_kernel_rejected(rng):
    with pytest.raises(ConfigError):
        DetailEmbeddedAttention(C, HEADS, rng, local_kernel=4)


def test_cross_attention_takes_query_length(rng):
    state = CrossAttention(C, HEADS, rng)
    out = cross_attention(tokens(rng, t=5), tokens(rng, t=7), state)
    assert out.shape == (2, 5, C)
    with pytest.raises(ShapeError):
        cross_attention(tokens(rng, t=5), Tensor(np.ones((2, 7, 4))), state)


def test_deab_block_preserves_shape(rng):
    block = DEABlock(C, HEADS, rng, local_kernel=3, cffn_ratio=2)
    x = Tensor(rng.standard_normal((2, C, H, W)))
    assert block(x).shape == x.shape


def dense_attention(xq, xkv, state):
    """Per-head loop with an explicit softmax, then W^P."""
    wq, wk, wv, wp = (p.data for p in (state.wq, state.wk, state.wv, state.wp))
    dh = state.head_dim
    out = np.zeros((xq.shape[0], xq.shape[1], state.channels))
    for b in range(xq.shape[0]):
        for j in range(state.heads):
            cols = slice(j * dh, (j + 1) * dh)
            q, k, v = xq[b] @ wq[:, cols], xkv[b] @ wk[:, cols], xkv[b] @ wv[:, cols]
            logits = q @ k.T / np.sqrt(dh)
            weights = np.exp(logits - logits.max(axis=1, keepdims=True))
            weights /= weights.sum(axis=1, keepdims=True)
            out[b, :, cols] = weights @ v
    return out @ wp


def test_global_attention_matches_dense_oracle(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng, mode=AttentionMode.GSA)
    x = tokens(rng)
    expected = dense_attention(x.data, x.data, state)
    npt.assert_allclose(dea(x, H, W, state).data, expected, rtol=0, atol=1e-10)


def test_cross_attention_matches_dense_oracle(rng):
    state = CrossAttention(C, HEADS, rng)
    q_src, kv_src = tokens(rng, t=5), tokens(rng, t=9)
    expected = dense_attention(q_src.data, kv_src.data, state)
    out = cross_attention(q_src, kv_src, state)
    npt.assert_allclose(out.data, expected, rtol=0, atol=1e-10)


def test_deab_is_batch_permutation_equivariant(rng):
    block = DEABlock(C, HEADS, rng, local_kernel=3, cffn_ratio=2)
    x = rng.standard_normal((3, C, H, W))
    order = [2, 0, 1]
    out = block(Tensor(x)).data
    npt.assert_allclose(block(Tensor(x[order])).data, out[order], atol=1e-12)


def test_local_attention_map_is_unbounded(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng, local_kernel=3)
    x_img = Tensor(50.0 * rng.standard_normal((1, C, H, W)))
    assert local_attention_map(x_img, state).data.max() > 1.0


def test_zero_local_branch_gives_zero_local_attention(rng):
    state = DetailEmbeddedAttention(C, HEADS, rng, local_kernel=3)
    state.local_out.weight.data[...] = 0.0
    state.local_out.bias.data[...] = 0.0
    x_img = Tensor(rng.standard_normal((2, C, H, W)))
    npt.assert_array_equal(local_attention(x_img, state).data, 0.0)


def test_single_key_token_returns_its_value_for_every_query(rng):
    state = CrossAttention(C, HEADS, rng)
    kv_src = tokens(rng, t=1)
    out = cross_attention(tokens(rng, t=5), kv_src, state).data
    expected = kv_src.data @ state.wv.data @ state.wp.data
    npt.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)
