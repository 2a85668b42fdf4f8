import numpy as np
import pytest

from tdnets import formats as fm
from tdnets.autodiff import Tape, check_gradients
from tdnets.errors import RankListLengthMismatch, ShapeMismatch
from tdnets.formats import Format, TDConfig
from tdnets.layers import TDConv2D, TDLinear, layer_param_info
from tdnets.networks import (
    TDLSTM,
    build_network,
    build_td_lenet5,
    build_td_lstm,
    build_td_resnet,
    build_tr_demo_classifier,
    lstm_step,
)
from tdnets.tensor import DenseTensor
from tdnets.verify import layer_loss_fn

FORMATS = ["cp", "tucker2", "btt", "tt", "tr"]


def td_layers(layer):
    if isinstance(layer, (TDLinear, TDConv2D)):
        yield layer
    for child in layer.children():
        yield from td_layers(child)


# --- demo ---------------------------------------------------------------------


def test_demo_forward_shape_and_finite_logits(rng):
    net = build_tr_demo_classifier(seed=1)
    out = net(rng.random((2, 1, 28, 28)))
    assert out.shape == (2, 10)
    assert np.all(np.isfinite(out.array))


def test_demo_layer_sequence():
    net = build_tr_demo_classifier()
    assert [layer.kind for layer in net.layers] == ["TDConv2D", "ReLU", "Flatten", "TDLinear"]
    conv, fc = net.layers[0], net.layers[3]
    assert conv.config == TDConfig(Format.TR, (1,), (4, 5), (6, 6, 6, 6), 3)
    assert fc.config == TDConfig(Format.TR, (20, 26, 26), (10,), (6, 6, 6, 6))


def test_demo_parameter_count():
    info = build_tr_demo_classifier().param_info()
    assert info.format_params == 684 + 2952
    assert info.params == 3636 + 20 + 10


# --- LeNet-5 --------------------------------------------------------------------


@pytest.mark.parametrize("fmt", FORMATS + ["dense"])
def test_lenet_forward_shape(fmt, rng):
    net = build_td_lenet5(fmt, 10, [3, 3, 3, 3], seed=0)
    assert net(rng.random((1, 1, 32, 32))).shape == (1, 10)


def test_lenet_dense_count():
    assert build_td_lenet5("dense", 10).param_info().params == 61706


def test_lenet_tr_count_equals_format_sums():
    net = build_td_lenet5("tr", 10, [6, 6, 6, 6])
    layers = list(td_layers(net))
    want = sum(fm.param_count(layer.config) + layer.config.out_size for layer in layers)
    assert net.param_info().params == want
    assert all(layer.config.format is Format.TR for layer in layers)


def test_lenet_rank_length():
    with pytest.raises(RankListLengthMismatch):
        build_td_lenet5("tr", 10, [6, 6, 6])


def test_lenet_other_class_counts(rng):
    net = build_td_lenet5("tt", 7, [2, 2, 2, 2], input_size=28)
    assert net(rng.random((2, 1, 28, 28))).shape == (2, 7)


# --- ResNet -------------------------------------------------------------------


def within(value, target, tol=0.2):
    return abs(value - target) <= tol * target


def test_resnet32_dense_size():
    assert within(build_td_resnet(32, "dense", [1] * 7, 10).param_info().params, 0.46e6)


def test_resnet32_cp_rank10():
    info = build_td_resnet(32, "cp", [10] * 7, 10).param_info()
    assert within(info.params, 0.03e6)
    assert within(info.cr, 18)


def test_resnet32_tr_rank10():
    info = build_td_resnet(32, "tr", [10] * 7, 10).param_info()
    assert within(info.params, 0.09e6)
    assert within(info.cr, 5)


def test_resnet_block_counts():
    for depth, blocks in ((20, 9), (32, 15)):
        net = build_td_resnet(depth, "tr", [2] * 7)
        assert sum(layer.kind == "BasicBlock" for layer in net.layers) == blocks


def test_resnet_first_conv_and_shortcuts_are_dense():
    net = build_td_resnet(20, "tt", [3] * 7)
    assert net.layers[0].kind == "DenseConv2D"
    for block in (layer for layer in net.layers if layer.kind == "BasicBlock"):
        assert block.conv1.config.format is Format.TT
        assert all(s.kind in ("DenseConv2D", "BatchNorm") for s in block.shortcut)


def test_resnet_rank_mapping():
    ranks = [2, 3, 4, 5, 6, 7, 8]
    net = build_td_resnet(20, "tr", ranks)
    blocks = [layer for layer in net.layers if layer.kind == "BasicBlock"]
    for stage in range(3):
        for block in blocks[3 * stage : 3 * stage + 3]:
            assert set(block.conv1.config.ranks) == {ranks[2 * stage]}
            assert set(block.conv2.config.ranks) == {ranks[2 * stage + 1]}
    assert set(net.layers[-1].config.ranks) == {8}


def test_resnet_rank_length():
    with pytest.raises(RankListLengthMismatch):
        build_td_resnet(20, "tr", [7] * 6)


def test_resnet20_forward_shape(rng):
    net = build_td_resnet(20, "tr", [3] * 7, num_classes=10)
    assert net(rng.random((2, 3, 32, 32))).shape == (2, 10)


# --- LSTM -------------------------------------------------------------------


def test_lstm_gate_counts():
    net = build_td_lstm([16, 16], [32, 32], [5, 5, 5, 5])
    lstm = net.layers[0]
    gate = lstm.gates_in["i"].param_info()
    per_gate = 5 * 16 * 5 + 5 * 16 * 5 + 5 * 32 * 5 + 5 * 32 * 5
    assert gate.format_params == per_gate == 2400
    assert sum(lstm.gates_in[g].param_info().format_params for g in "ifgo") == 4 * 2400
    assert sum(lstm.gates_in[g].param_info().dense_format_params for g in "ifgo") == 4 * 256 * 1024 == 1048576


def test_lstm_zero_weights_keep_state_zero():
    cfg = TDConfig(Format.TR, (2, 2), (2, 3), (2, 2, 2, 2))
    layer = TDLSTM(cfg)
    for g in "ifgo":
        for sub in (layer.gates_in[g], layer.gates_hh[g]):
            for k, v in sub.params.items():
                sub.params[k] = DenseTensor(np.zeros(v.shape))
    layer.gates_in["f"].params["bias"] = DenseTensor(np.ones(6))
    tape = Tape()
    x = tape.constant(np.zeros((3, 4)))
    state = layer.initial_state(tape.constant(np.zeros((3, 2, 4))))
    h, c = lstm_step(layer, state, x)
    assert np.array_equal(h.array, np.zeros((3, 6))) and np.array_equal(c.array, np.zeros((3, 6)))
    # a cell-input bias moves only through the gates: c = sigmoid(0) * tanh(b_g)
    layer.gates_in["g"].params["bias"] = DenseTensor(np.full(6, 0.5))
    tape = Tape()
    x = tape.constant(np.zeros((3, 4)))
    h, c = lstm_step(layer, layer.initial_state(tape.constant(np.zeros((3, 2, 4)))), x)
    assert np.allclose(c.array, 0.5 * np.tanh(0.5), rtol=0, atol=1e-15)
    assert np.allclose(h.array, 0.5 * np.tanh(0.5 * np.tanh(0.5)), rtol=0, atol=1e-15)


def test_lstm_forget_bias_is_one():
    lstm = build_td_lstm([4], [3], [2, 2]).layers[0]
    assert np.array_equal(lstm.gates_in["f"].params["bias"].array, np.ones(3))
    assert np.array_equal(lstm.gates_in["i"].params["bias"].array, np.zeros(3))


def test_lstm_shapes(rng):
    net = build_td_lstm([2, 3], [2, 2], [2, 2, 2, 2], num_classes=5)
    assert net(rng.standard_normal((4, 7, 6))).shape == (4, 5)
    with pytest.raises(ShapeMismatch):
        net(rng.standard_normal((4, 7, 5)))


def test_lstm_gradient_three_unrolled_steps(rng):
    lstm = TDLSTM(TDConfig(Format.TR, (2, 2), (2, 2), (2, 2, 2, 2)), seed=4)
    lstm.assign_names()
    f, params = layer_loss_fn(lstm, rng.standard_normal((2, 3, 4)))
    assert check_gradients(f, params) <= 1e-4


# --- cross-builder invariants ------------------------------------------------------


def all_builders():
    yield build_tr_demo_classifier(seed=2)
    for fmt in FORMATS + ["dense"]:
        yield build_td_lenet5(fmt, 10, [2, 2, 2, 2])
        yield build_td_resnet(20, fmt, [2] * 7)
        yield build_td_lstm([4, 4], [4, 4], 2, fmt, num_classes=3)


def test_builders_shape_trace_and_counts():
    for net in all_builders():
        trace = net.shape_trace(batch=2)
        assert trace[0] == (2,) + net.input_shape
        assert trace[-1] == (2, net.num_classes)
        assert net.param_info().params == sum(layer_param_info(layer)[0] for layer in net.layers)


@pytest.mark.parametrize("fmt", FORMATS)
def test_dense_and_factorized_give_same_shapes(fmt, rng):
    x = rng.random((2, 1, 32, 32))
    assert build_td_lenet5(fmt, 10, [2] * 4)(x).shape == build_td_lenet5("dense", 10, [2] * 4)(x).shape


def test_build_network_from_record():
    for net in all_builders():
        again = build_network(net.builder)
        assert again.describe() == net.describe()
        for name, t in net.parameters().items():
            assert again.parameters()[name].bitwise_equal(t)
