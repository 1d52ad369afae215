import numpy as np
import numpy.testing as npt
import pytest

from rccformer.core.errors import ConfigError, RCCError, ShapeError
from rccformer.core.nnops import (BatchNorm2d, BatchNormStats, Conv2dSpec, LayerNorm,
                                  NormSpec, batch_norm, bilinear_sample, conv2d,
                                  depthwise_conv2d, interpolation_matrix, layer_norm,
                                  softmax, upsample_bilinear)
from rccformer.core.rng import make_rng
from rccformer.core.tensor import Parameter, Tape, Tensor
from rccformer.enums import NormKind


def naive_conv(x, w, bias, stride, padding, dilation, groups):
    b, c, h, wd = x.shape
    out_c, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    og = out_c // groups
    out = np.zeros((b, out_c, ho, wo))
    for n in range(b):
        for o in range(out_c):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                row = i * stride + u * dilation
                                col = j * stride + v * dilation
                                acc += xp[n, g * cg + ci, row, col] * w[o, ci, u, v]
                    out[n, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def random_specs(count=20, seed=5):
    rng = make_rng(seed)
    specs = []
    while len(specs) < count:
        groups = int(rng.choice([1, 2]))
        cin = groups * int(rng.integers(1, 3))
        cout = groups * int(rng.integers(1, 3))
        k = int(rng.choice([1, 2, 3]))
        kw = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        dilation = int(rng.integers(1, 3))
        bias = bool(rng.integers(0, 2))
        spec = Conv2dSpec(cin, cout, (k, kw), stride=stride, padding=padding,
                          dilation=dilation, groups=groups, bias=bias)
        if min(spec.output_size(6, 7)) >= 1:
            specs.append(spec)
    return specs


@pytest.mark.parametrize("spec", random_specs())
def test_conv2d_matches_naive_loops(spec):
    rng = make_rng(11)
    x = rng.standard_normal((2, spec.in_channels, 6, 7))
    w = rng.standard_normal(spec.weight_shape)
    bias = rng.standard_normal(spec.out_channels) if spec.bias else None
    out = conv2d(Tensor(x), spec, Tensor(w), Tensor(bias) if bias is not None else None)
    expected = naive_conv(x, w, bias, spec.stride, spec.padding, spec.dilation,
                          spec.groups)
    npt.assert_allclose(out.data, expected, atol=1e-10)


def test_depthwise_matches_naive_loops(rng):
    spec = Conv2dSpec(4, 4, (3, 3), padding=2, dilation=2, groups=4)
    x, w = rng.standard_normal((1, 4, 5, 5)), rng.standard_normal(spec.weight_shape)
    bias = rng.standard_normal(4)
    out = depthwise_conv2d(Tensor(x), spec, Tensor(w), Tensor(bias))
    npt.assert_allclose(out.data, naive_conv(x, w, bias, 1, 2, 2, 4), atol=1e-10)


def test_depthwise_requires_full_groups():
    spec = Conv2dSpec(4, 4, (3, 3), groups=2)
    with pytest.raises(ConfigError):
        depthwise_conv2d(Tensor(np.ones((1, 4, 3, 3))), spec,
                         Tensor(np.ones(spec.weight_shape)), Tensor(np.zeros(4)))


def test_conv_spec_rejects_bad_groups():
    with pytest.raises(ConfigError):
        Conv2dSpec(3, 4, 3, groups=2)


def test_conv2d_rejects_wrong_channels():
    spec = Conv2dSpec(3, 2, 1, bias=False)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), spec, Tensor(np.ones(spec.weight_shape)))


def test_layer_norm_zero_mean_unit_variance(rng):
    x = 50.0 * rng.standard_normal((2, 3, 8)) + 7.0
    out = layer_norm(Tensor(x), NormSpec(NormKind.LAYER, 8)).data
    npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    npt.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_module_shapes():
    with pytest.raises(ShapeError):
        LayerNorm(4)(Tensor(np.ones((2, 3))))


def test_batch_norm_first_batch_initialises_running_stats(rng):
    x = rng.standard_normal((4, 3, 2, 2)) * 2.0 + 1.0
    stats = BatchNormStats.fresh(3)
    batch_norm(Tensor(x), NormSpec(NormKind.BATCH, 3, 1e-5), stats, training=True)
    npt.assert_allclose(stats.running_mean, x.mean(axis=(0, 2, 3)))
    npt.assert_allclose(stats.running_var, x.var(axis=(0, 2, 3)))
    y = rng.standard_normal((4, 3, 2, 2))
    batch_norm(Tensor(y), NormSpec(NormKind.BATCH, 3, 1e-5), stats, training=True)
    expected = 0.9 * x.mean(axis=(0, 2, 3)) + 0.1 * y.mean(axis=(0, 2, 3))
    npt.assert_allclose(stats.running_mean, expected)
    assert float(stats.batches_tracked) == 2.0


def test_batch_norm_eval_before_training_fails():
    layer = BatchNorm2d(2).eval()
    with pytest.raises(RCCError):
        layer(Tensor(np.ones((1, 2, 2, 2))))


def test_bilinear_sample_on_lattice_reads_pixels(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    coords = np.array([[[0.0, 0.0], [2.0, 3.0], [1.0, 2.0]]])
    out = bilinear_sample(Tensor(x), Tensor(coords)).data
    npt.assert_array_equal(out[0, :, 0], x[0, :, 0, 0])
    npt.assert_array_equal(out[0, :, 1], x[0, :, 2, 3])
    npt.assert_array_equal(out[0, :, 2], x[0, :, 1, 2])


def test_bilinear_sample_outside_reads_zero(rng):
    x = rng.standard_normal((1, 1, 2, 2))
    coords = np.array([[[-3.0, 0.5], [0.5, 5.0], [-0.5, 0.0]]])
    out = bilinear_sample(Tensor(x), Tensor(coords)).data[0, 0]
    npt.assert_allclose(out[:2], 0.0)
    npt.assert_allclose(out[2], 0.5 * x[0, 0, 0, 0])


def test_bilinear_sample_midpoint_average():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = bilinear_sample(Tensor(x), Tensor(np.array([[[0.5, 0.5]]]))).data
    npt.assert_allclose(out, [[[1.5]]])


def test_interpolation_rows_sum_to_one():
    m = interpolation_matrix(5, 4)
    npt.assert_allclose(m.sum(axis=1), 1.0)
    assert m.shape == (20, 5)


def test_upsample_constant_map_stays_constant():
    out = upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 4.0)), 2).data
    assert out.shape == (1, 2, 6, 6)
    npt.assert_allclose(out, 4.0)


def test_upsample_scale_one_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)))
    assert upsample_bilinear(x, 1) is x
    with pytest.raises(ConfigError):
        upsample_bilinear(x, 0)


def test_softmax_rows_sum_to_one(rng):
    out = softmax(Tensor(100.0 * rng.standard_normal((3, 7)))).data
    npt.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_conv_parameters_receive_gradients(rng):
    spec = Conv2dSpec(2, 3, 3, padding=1)
    w = Parameter(rng.standard_normal(spec.weight_shape))
    b = Parameter(np.zeros(3))
    with Tape() as tape:
        loss = conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), spec, w, b).sum()
    tape.backward(loss)
    assert w.grad.shape == w.shape
    npt.assert_allclose(b.grad, np.full(3, 16.0))
