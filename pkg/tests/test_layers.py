import itertools

import numpy as np
import pytest

from tdnets import formats as fm
from tdnets.autodiff import Tape, check_gradients
from tdnets.errors import KernelLargerThanInput, ShapeMismatch
from tdnets.formats import Format, TDConfig
from tdnets.layers import (
    BatchNorm,
    DenseConv2D,
    DenseLinear,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    ReLU,
    Sequential,
    TDConv2D,
    TDLinear,
    conv_output_size,
    im2col,
    layer_param_info,
)
from tdnets.tensor import DenseTensor
from tdnets.verify import layer_loss_fn, random_config

TD = [Format.CP, Format.TUCKER2, Format.BTT, Format.TT, Format.TR]
DEMO_LINEAR = TDConfig(Format.TR, [20, 26, 26], [10], [6, 6, 6, 6])
DEMO_CONV = TDConfig(Format.TR, [1], [4, 5], [6, 6, 6, 6], kernel=3)


def conv_six_loops(x, w, b, stride, pad):
    """Textbook convolution: batch, out channel, rows, cols, in channel, kernel offsets."""
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    oh, ow = (H + 2 * pad - K) // stride + 1, (W + 2 * pad - K) // stride + 1
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    out = np.zeros((B, O, oh, ow))
    for n in range(B):
        for o in range(O):
            for i in range(oh):
                for j in range(ow):
                    s = b[o]
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                s += xp[n, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[n, o, i, j] = s
    return out


def rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def set_param(layer, name, value):
    layer.params[name] = DenseTensor(value)


# --- linear -------------------------------------------------------------------


def test_dense_identity_linear():
    layer = DenseLinear(4, 4)
    set_param(layer, "weight", np.eye(4))
    e2 = np.array([[0.0, 0.0, 1.0, 0.0]])
    assert np.array_equal(layer(e2).array, e2)


def test_demo_linear_matches_reconstruction(rng):
    layer = TDLinear(DEMO_LINEAR, seed=3)
    set_param(layer, "bias", rng.standard_normal(10))
    x = rng.standard_normal((4, 20 * 26 * 26))
    want = x @ fm.reconstruct(layer.coreset).array.reshape(-1, 10) + layer.params["bias"].array
    assert rel(layer(x).array, want) <= 1e-10


def test_linear_empty_batch():
    layer = TDLinear(DEMO_LINEAR)
    out = layer(np.zeros((0, 20 * 26 * 26)))
    assert out.shape == (0, 10)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        TDLinear(DEMO_LINEAR)(np.zeros((2, 100)))


@pytest.mark.parametrize("fmt", TD)
def test_linear_factorized_equals_dense_20_configs(fmt):
    rng = np.random.default_rng(31)
    for i in range(20):
        cfg = random_config(rng, fmt)
        layer = TDLinear(cfg, seed=i)
        set_param(layer, "bias", rng.standard_normal(cfg.out_size))
        x = rng.standard_normal((3, cfg.in_size))
        want = x @ fm.reconstruct(layer.coreset).array.reshape(cfg.in_size, cfg.out_size) + layer.params["bias"].array
        assert rel(layer(x).array, want) <= 1e-10


def test_linear_bias_starts_at_zero_and_can_be_disabled():
    assert np.array_equal(TDLinear(DEMO_LINEAR).params["bias"].array, np.zeros(10))
    assert "bias" not in TDLinear(DEMO_LINEAR, bias=False).params


# --- conv ---------------------------------------------------------------------


def test_identity_1x1_conv(rng):
    layer = DenseConv2D(2, 2, 1)
    set_param(layer, "weight", np.eye(2).reshape(1, 1, 2, 2))
    x = rng.standard_normal((3, 2, 4, 5))
    assert np.array_equal(layer(x).array, x)


def test_demo_conv_output_shape(rng):
    out = TDConv2D(DEMO_CONV)(rng.random((2, 1, 28, 28)))
    assert out.shape == (2, 20, 26, 26)


def test_small_conv_matches_six_loop_oracle(rng):
    cfg = TDConfig(Format.DENSE, [2], [3], kernel=3)
    layer = TDConv2D(cfg, stride=1, padding=0)
    set_param(layer, "weight", rng.standard_normal((3, 3, 2, 3)))
    set_param(layer, "bias", rng.standard_normal(3))
    x = rng.standard_normal((2, 2, 5, 5))
    want = conv_six_loops(x, layer.kernel_tensor().array, layer.params["bias"].array, 1, 0)
    assert rel(layer(x).array, want) <= 1e-12


def test_kernel_tensor_layout(rng):
    # weight stored as [K, K, Cin, Cout]; the conv kernel is [Cout, Cin, K, K]
    layer = DenseConv2D(2, 3, 3)
    w = rng.standard_normal((3, 3, 2, 3))
    set_param(layer, "weight", w)
    assert np.array_equal(layer.kernel_tensor().array, w.transpose(3, 2, 0, 1))


@pytest.mark.parametrize("fmt", TD)
def test_conv_factorized_equals_dense_20_configs(fmt):
    rng = np.random.default_rng(41)
    for i in range(20):
        cfg = random_config(rng, fmt, conv=True)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        layer = TDConv2D(cfg, stride=stride, padding=pad, seed=i)
        set_param(layer, "bias", rng.standard_normal(cfg.out_size))
        x = rng.standard_normal((2, cfg.in_size, 4, 5))
        kernel = fm.reconstruct(layer.coreset).array.reshape(cfg.kernel, cfg.kernel, cfg.in_size, cfg.out_size)
        want = conv_six_loops(x, kernel.transpose(3, 2, 0, 1), layer.params["bias"].array, stride, pad)
        assert rel(layer(x).array, want) <= 1e-10


@pytest.mark.parametrize("k,stride,pad", list(itertools.product([1, 3, 5], [1, 2], [0, 1, 2])))
def test_conv_output_shape_grid(k, stride, pad):
    layer = DenseConv2D(1, 2, k, stride=stride, padding=pad)
    out = layer(np.zeros((1, 1, 7, 8)))
    assert out.shape == (1, 2, (7 + 2 * pad - k) // stride + 1, (8 + 2 * pad - k) // stride + 1)
    assert out.shape[2:] == (conv_output_size(7, k, stride, pad), conv_output_size(8, k, stride, pad))
    assert layer.check_input((None, 1, 7, 8)) == (None,) + out.shape[1:]


def test_conv_errors():
    layer = TDConv2D(DEMO_CONV)
    with pytest.raises(KernelLargerThanInput):
        layer(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeMismatch):
        layer(np.zeros((1, 2, 5, 5)))


# --- im2col -------------------------------------------------------------------


def test_im2col_k1_is_reshape(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    cols = im2col(x, 1).array
    assert np.array_equal(cols, x.transpose(0, 2, 3, 1).reshape(-1, 3))


def test_im2col_patches():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    cols = im2col(x, 2).array
    assert np.array_equal(cols, [[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]])


def test_im2col_padding():
    cols = im2col(np.full((1, 1, 1, 1), 7.0), 3, padding=1).array
    assert cols.shape == (1, 9)
    assert np.array_equal(cols[0], [0, 0, 0, 0, 7, 0, 0, 0, 0])


def test_im2col_column_order(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    cols = im2col(x, 2, stride=1).array
    # first row: patch at (0,0), columns ordered (c, ki, kj)
    assert np.array_equal(cols[0], x[0, :, :2, :2].reshape(-1))


# --- param info ----------------------------------------------------------------


def test_param_info_examples():
    assert layer_param_info(DenseLinear(256, 10)) == (2570, 2570, 1.0)
    info = TDLinear(DEMO_LINEAR).param_info()
    assert (info.format_params, info.dense_format_params) == (2952, 135200)
    assert (info.params, info.dense_params) == (2962, 135210)
    assert layer_param_info(MaxPool2D(2)) == (0, 0, 1.0)
    conv = TDConv2D(DEMO_CONV).param_info()
    assert (conv.format_params, conv.params, conv.dense_params) == (684, 704, 200)


def test_sequential_param_info_sums_children():
    seq = Sequential([TDConv2D(DEMO_CONV), ReLU(), Flatten(), TDLinear(DEMO_LINEAR)])
    total = seq.param_info()
    parts = [layer.param_info() for layer in seq.layers]
    assert total.params == sum(p.params for p in parts) == 3666


# --- other layers ---------------------------------------------------------------


def test_flatten_relu_pool_shapes(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert Flatten()(x).shape == (2, 48)
    assert MaxPool2D(2)(x).shape == (2, 3, 2, 2)
    assert GlobalAvgPool()(x).shape == (2, 3)
    assert np.array_equal(ReLU()(x).array, np.maximum(x, 0))


def test_global_avg_pool_values(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    assert rel(GlobalAvgPool()(x).array, x.mean(axis=(2, 3))) <= 1e-14


def test_batch_norm_running_statistics(rng):
    bn = BatchNorm(3)
    bn.assign_names()
    x = rng.standard_normal((5, 3, 2, 2)) * 2 + 1
    bn(x, training=True)
    n = 5 * 2 * 2
    mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) * n / (n - 1)
    assert rel(bn.buffers["running_mean"].array, 0.1 * mean) <= 1e-14
    assert rel(bn.buffers["running_var"].array, 0.9 + 0.1 * var) <= 1e-14
    # inference uses running statistics
    y = bn(x, training=False).array
    want = (x - bn.buffers["running_mean"].array[None, :, None, None]) / np.sqrt(
        bn.buffers["running_var"].array[None, :, None, None] + 1e-5)
    assert rel(y, want) <= 1e-12


def test_layer_contract_methods_present():
    for layer in (TDLinear(DEMO_LINEAR), TDConv2D(DEMO_CONV), MaxPool2D(2), BatchNorm(2), ReLU(), Flatten()):
        for name in ("check_input", "init_parameters", "forward", "param_info"):
            assert callable(getattr(layer, name))


def test_init_parameters_reseeds():
    layer = TDLinear(TDConfig(Format.TT, [2, 3], [3, 2], [2]), seed=1)
    first = dict(layer.params)
    layer.init_parameters(2)
    assert not layer.params["core0"].bitwise_equal(first["core0"])
    layer.init_parameters(1)
    assert all(layer.params[k].bitwise_equal(first[k]) for k in first)


@pytest.mark.parametrize("make,shape,training", [
    (lambda: DenseLinear(5, 3), (4, 5), False),
    (lambda: DenseConv2D(2, 3, 3, stride=2, padding=1), (2, 2, 5, 5), False),
    (lambda: BatchNorm(3), (6, 3), True),
    (lambda: BatchNorm(2), (3, 2, 2, 2), True),
    (lambda: Sequential([TDConv2D(TDConfig(Format.TR, [1], [2, 2], [2, 2, 2, 2], kernel=3)), ReLU(),
                         MaxPool2D(2), Flatten(), TDLinear(TDConfig(Format.TR, [4, 4], [3], [2, 2, 2]))]),
     (2, 1, 6, 6), False),
])
def test_layer_gradients_match_finite_differences(make, shape, training):
    layer = make()
    layer.assign_names()
    rng = np.random.default_rng(5)
    for name, owner, local in layer.named_parameters():
        owner.params[local] = DenseTensor(owner.params[local].array + 0.3 * rng.standard_normal(owner.params[local].shape))
    f, params = layer_loss_fn(layer, rng.standard_normal(shape), training=training)
    assert check_gradients(f, params) <= 1e-4


def test_forward_records_named_parameters():
    layer = TDLinear(DEMO_LINEAR)
    tape = Tape()
    layer.forward(tape.constant(np.zeros((1, 13520))))
    assert set(tape.watched) == {"in0", "in1", "in2", "out0", "bias"}
