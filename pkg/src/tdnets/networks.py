"""Network builders: the MNIST demo classifier, LeNet-5, CIFAR ResNets, LSTM.

Scalar rank settings are expanded to the rank list each format needs
(:func:`expand_ranks`). Channel and feature sizes are split into modes with
fixed tables, so parameter counts are reproducible:

=========  =====================================================
ResNet     16 -> (4, 2, 2), 32 -> (4, 4, 2), 64 -> (4, 4, 4);
           classes split into 3 balanced modes
LeNet-5    1 -> (1,), 6 -> (6,), 16 -> (16,); 400 -> (20, 20),
           120 -> (8, 15), 84 -> (7, 12); classes split into 2
=========  =====================================================

CP and Tucker-2 act on whole channels (one input and one output mode)
in convolutions; the mode tables apply to TT, TR and BTT.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import formats as fm
from .autodiff import Variable, add_v, contract_v, mul_v, relu_v, sigmoid_v, tanh_v
from .errors import RankListLengthMismatch, ShapeMismatch
from .formats import Format, TDConfig
from .layers import (
    BatchNorm,
    DenseConv2D,
    DenseLinear,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2D,
    ParamInfo,
    ReLU,
    Sequential,
    TDConv2D,
    TDLinear,
)
from .tensor import DenseTensor

__all__ = [
    "Network",
    "BasicBlock",
    "TDLSTM",
    "expand_ranks",
    "make_config",
    "build_tr_demo_classifier",
    "build_td_lenet5",
    "build_td_resnet",
    "build_td_lstm",
    "build_network",
    "lstm_step",
    "RESNET_MODES",
    "LENET_MODES",
]

RESNET_MODES = {16: (4, 2, 2), 32: (4, 4, 2), 64: (4, 4, 4)}
LENET_MODES = {1: (1,), 6: (6,), 16: (16,), 400: (20, 20), 120: (8, 15), 84: (7, 12)}


def expand_ranks(fmt, rank: int, d: int, k: int, conv: bool) -> tuple[int, ...]:
    """Uniform rank list of the length ``fmt`` requires."""
    fmt = Format.parse(fmt)
    probe = TDConfig(fmt, [1] * d, [1] * k, (), 1 if conv else None)
    return (int(rank),) * fm.expected_rank_length(probe)


def make_config(fmt, n_in: int, n_out: int, rank, table: dict, classes_modes=None, kernel=None,
                blocks: int = 1) -> TDConfig:
    """Layer config for ``n_in -> n_out`` using a mode table.

    ``rank`` is a scalar (expanded) or an explicit rank list.
    """
    fmt = Format.parse(fmt)
    if fmt is Format.DENSE or (kernel is not None and fmt in (Format.CP, Format.TUCKER2)):
        n_modes, m_modes = (n_in,), (n_out,)
    else:
        n_modes = table.get(n_in) or fm.split_modes(n_in, len(next(iter(table.values()))))
        m_modes = classes_modes or table.get(n_out)
        if m_modes is None:
            m_modes = fm.split_modes(n_out, len(n_modes))
    if fmt is Format.DENSE:
        ranks = ()
    elif isinstance(rank, (int, np.integer)):
        ranks = expand_ranks(fmt, rank, len(n_modes), len(m_modes), kernel is not None)
    else:
        ranks = tuple(rank)
    return fm.validate(TDConfig(fmt, n_modes, m_modes, ranks, kernel, blocks if fmt is Format.BTT else 1))


class Network(Sequential):
    """A buildable, serializable model: layer list plus metadata."""

    kind = "Network"

    def __init__(self, arch: str, layers: Sequence[Layer], input_shape: tuple, num_classes: int,
                 builder: dict):
        super().__init__(layers)
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.builder = builder
        self.assign_names()
        self.shape_trace()

    def shape_trace(self, batch=None) -> list[tuple]:
        """Symbolic forward; raises ShapeMismatch on incompatible neighbours."""
        shape = (batch,) + self.input_shape
        trace = [shape]
        for layer in self.layers:
            shape = layer.check_input(shape)
            trace.append(shape)
        return trace

    @property
    def output_shape(self) -> tuple:
        return self.shape_trace()[-1]

    def parameters(self) -> dict[str, DenseTensor]:
        return {name: layer.params[local] for name, layer, local in self.named_parameters()}

    def set_parameters(self, values: dict) -> None:
        for name, layer, local in self.named_parameters():
            if name in values:
                new = values[name]
                new = new if isinstance(new, DenseTensor) else DenseTensor(new)
                if new.shape != layer.params[local].shape:
                    raise ShapeMismatch(f"{name}: {list(new.shape)} vs {list(layer.params[local].shape)}")
                layer.params[local] = new

    def buffers_dict(self) -> dict[str, DenseTensor]:
        return {name: layer.buffers[local] for name, layer, local in self.named_buffers()}

    def set_buffers(self, values: dict) -> None:
        for name, layer, local in self.named_buffers():
            if name in values:
                layer.buffers = dict(layer.buffers, **{local: DenseTensor(values[name])})

    def layer_report(self) -> list[dict]:
        """One row per top-level layer (and per block for ResNets)."""
        rows = []
        for layer in self.layers:
            info = layer.param_info()
            row = {
                "name": layer.name,
                "kind": layer.kind,
                "format": getattr(getattr(layer, "config", None), "format", None),
                "params": info.params,
                "dense_params": info.dense_params,
                "cr": info.cr,
            }
            row["format"] = str(row["format"]) if row["format"] is not None else None
            rows.append(row)
        return rows

    def describe(self) -> dict:
        return {
            "arch": self.arch,
            "builder": self.builder,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.describe() for layer in self.layers],
        }

    def predict(self, x) -> DenseTensor:
        return self(x, training=False)


# --- demo classifier --------------------------------------------------------


def build_tr_demo_classifier(seed: int = 0) -> Network:
    """TR conv (1 -> 4x5 channels, 3x3) -> ReLU -> flatten -> TR linear to 10 classes."""
    conv = TDConv2D(TDConfig(Format.TR, [1], [4, 5], [6, 6, 6, 6], kernel=3), seed=[seed, 0])
    fc = TDLinear(TDConfig(Format.TR, [20, 26, 26], [10], [6, 6, 6, 6]), seed=[seed, 1])
    return Network("DEMO", [conv, ReLU(), Flatten(), fc], (1, 28, 28), 10,
                   {"name": "demo", "kwargs": {"seed": seed}})


# --- LeNet-5 ----------------------------------------------------------------


def build_td_lenet5(format="tr", num_classes: int = 10, ranks: Sequence[int] = (6, 6, 6, 6),
                    seed: int = 0, input_size: int = 32, blocks: int = 5) -> Network:
    """LeNet-5 with every weight layer factorized.

    Rank entries go to conv1, conv2, fc1 and the two trailing fully-connected
    layers (120 -> 84 -> classes share the last entry).
    """
    ranks = list(ranks)
    if len(ranks) != 4:
        raise RankListLengthMismatch(f"LeNet-5 takes 4 rank entries, got {len(ranks)}")
    fmt = Format.parse(format)
    pad = (32 - input_size) // 2
    cls_modes = fm.split_modes(num_classes, 2)

    def cfg(a, b, r, kernel=None, cm=None):
        return make_config(fmt, a, b, r, LENET_MODES, cm, kernel, blocks)

    layers = [
        TDConv2D(cfg(1, 6, ranks[0], 5), padding=pad, seed=[seed, 0]),
        ReLU(),
        MaxPool2D(2),
        TDConv2D(cfg(6, 16, ranks[1], 5), seed=[seed, 1]),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
        TDLinear(cfg(400, 120, ranks[2]), seed=[seed, 2]),
        ReLU(),
        TDLinear(cfg(120, 84, ranks[3]), seed=[seed, 3]),
        ReLU(),
        TDLinear(cfg(84, num_classes, ranks[3], cm=cls_modes), seed=[seed, 4]),
    ]
    kwargs = {"format": fmt.value, "num_classes": num_classes, "ranks": ranks, "seed": seed,
              "input_size": input_size, "blocks": blocks}
    return Network("LENET5", layers, (1, input_size, input_size), num_classes,
                   {"name": "lenet5", "kwargs": kwargs})


# --- ResNet -----------------------------------------------------------------


class BasicBlock(Layer):
    """Two 3x3 convs with batch norm and an identity or 1x1 projection shortcut."""

    kind = "BasicBlock"

    def __init__(self, conv1: TDConv2D, conv2: TDConv2D, cin: int, cout: int, stride: int, seed):
        super().__init__()
        self.conv1, self.bn1 = conv1, BatchNorm(cout)
        self.conv2, self.bn2 = conv2, BatchNorm(cout)
        self.shortcut: list[Layer] = []
        if stride != 1 or cin != cout:
            self.shortcut = [DenseConv2D(cin, cout, 1, stride=stride, bias=False, seed=seed), BatchNorm(cout)]
        # distinct tape keys even when the block is used on its own
        self.assign_names()

    def children(self) -> list[Layer]:
        return [self.conv1, self.bn1, self.conv2, self.bn2] + self.shortcut

    def check_input(self, shape):
        out = self.bn1.check_input(self.conv1.check_input(shape))
        out = self.bn2.check_input(self.conv2.check_input(out))
        short = shape
        for layer in self.shortcut:
            short = layer.check_input(short)
        if tuple(short) != tuple(out):
            raise ShapeMismatch(f"residual branch {list(out)} vs shortcut {list(short)}")
        return out

    def forward(self, x: Variable, training: bool = False) -> Variable:
        y = relu_v(self.bn1.forward(self.conv1.forward(x, training), training))
        y = self.bn2.forward(self.conv2.forward(y, training), training)
        s = x
        for layer in self.shortcut:
            s = layer.forward(s, training)
        return relu_v(add_v(y, s))

    def describe(self) -> dict:
        return {"kind": self.kind, "layers": [c.describe() for c in self.children()]}


def build_td_resnet(depth: int = 20, format="tr", ranks: Sequence[int] = (7,) * 7, num_classes: int = 10,
                    seed: int = 0, blocks: int = 5) -> Network:
    """CIFAR ResNet-20/32 with factorized stage convs and classifier.

    Rank entries: 1-2 stage-1 convs (first/second conv of each block),
    3-4 stage 2, 5-6 stage 3, 7 the classifier. ``blocks`` is the BTT
    block-term count.
    """
    if depth not in (20, 32):
        raise ValueError(f"depth must be 20 or 32, got {depth}")
    ranks = list(ranks)
    if len(ranks) != 7:
        raise RankListLengthMismatch(f"ResNet takes 7 rank entries, got {len(ranks)}")
    fmt = Format.parse(format)
    per_stage = (depth - 2) // 6
    layers: list[Layer] = [DenseConv2D(3, 16, 3, padding=1, bias=False, seed=[seed, 0]), BatchNorm(16), ReLU()]
    cin, idx = 16, 1
    for stage, cout in enumerate((16, 32, 64)):
        for b in range(per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            c1 = TDConv2D(make_config(fmt, cin, cout, ranks[2 * stage], RESNET_MODES, kernel=3, blocks=blocks),
                          stride=stride, padding=1, bias=False, seed=[seed, idx])
            c2 = TDConv2D(make_config(fmt, cout, cout, ranks[2 * stage + 1], RESNET_MODES, kernel=3, blocks=blocks),
                          stride=1, padding=1, bias=False, seed=[seed, idx + 1])
            layers.append(BasicBlock(c1, c2, cin, cout, stride, seed=[seed, idx + 2]))
            cin, idx = cout, idx + 3
    cls_modes = fm.split_modes(num_classes, 3)
    layers += [
        GlobalAvgPool(),
        TDLinear(make_config(fmt, 64, num_classes, ranks[6], RESNET_MODES, cls_modes, blocks=blocks),
                 seed=[seed, idx]),
    ]
    kwargs = {"depth": depth, "format": fmt.value, "ranks": ranks, "num_classes": num_classes, "seed": seed,
              "blocks": blocks}
    return Network(f"RESNET{depth}", layers, (3, 32, 32), num_classes, {"name": "resnet", "kwargs": kwargs})


# --- LSTM -------------------------------------------------------------------

_GATES = ("i", "f", "g", "o")


class TDLSTM(Layer):
    """LSTM over ``[batch, time, I]``; input-to-hidden maps are factorized.

    Each gate has its own TD-Linear (with bias) from the input modes to the
    hidden modes and a dense hidden-to-hidden matrix without bias. The
    forget-gate bias starts at 1. Returns the final hidden state.
    """

    kind = "TDLSTM"

    def __init__(self, config: TDConfig, seed=0):
        super().__init__()
        self.config = config
        h = config.out_size
        self.hidden_size = h
        self.input_size = config.in_size
        base = [int(s) for s in np.atleast_1d(seed)]
        self.gates_in = {g: TDLinear(config, seed=base + [i]) for i, g in enumerate(_GATES)}
        self.gates_hh = {g: DenseLinear(h, h, bias=False, seed=base + [10 + i]) for i, g in enumerate(_GATES)}
        bias = self.gates_in["f"].params["bias"]
        self.gates_in["f"].params["bias"] = DenseTensor(np.ones(bias.shape))
        self.assign_names()

    def children(self) -> list[Layer]:
        return [self.gates_in[g] for g in _GATES] + [self.gates_hh[g] for g in _GATES]

    def check_input(self, shape):
        if len(shape) != 3 or shape[2] != self.input_size:
            raise ShapeMismatch(f"TDLSTM expects [batch, time, {self.input_size}], got {list(shape)}")
        return (shape[0], self.hidden_size)

    def initial_state(self, x: Variable) -> tuple[Variable, Variable]:
        z = np.zeros((x.shape[0], self.hidden_size))
        return x.tape.constant(z), x.tape.constant(z)

    def step(self, state: tuple[Variable, Variable], x_t: Variable, training: bool = False):
        h, c = state
        pre = {g: add_v(self.gates_in[g].forward(x_t, training), self.gates_hh[g].forward(h, training))
               for g in _GATES}
        i, f, o = sigmoid_v(pre["i"]), sigmoid_v(pre["f"]), sigmoid_v(pre["o"])
        g = tanh_v(pre["g"])
        c = add_v(mul_v(f, c), mul_v(i, g))
        h = mul_v(o, tanh_v(c))
        return h, c

    def forward(self, x: Variable, training: bool = False) -> Variable:
        self.check_input(x.shape)
        steps = x.shape[1]
        state = self.initial_state(x)
        for t in range(steps):
            pick = np.zeros(steps)
            pick[t] = 1.0
            state = self.step(state, contract_v(x, pick, [1], [0]), training)
        return state[0]

    def param_info(self) -> ParamInfo:
        info = ParamInfo(0, 0)
        for child in self.children():
            info = info + child.param_info()
        return info

    def describe(self) -> dict:
        return {"kind": self.kind, "config": self.config.to_dict()}


def lstm_step(layer: TDLSTM, state, x_t: Variable, training: bool = False):
    """One cell update ``(h, c) -> (h', c')``."""
    return layer.step(state, x_t, training)


def build_td_lstm(in_modes: Sequence[int], hidden_modes: Sequence[int], ranks, format="tr",
                  num_classes: int | None = None, seed: int = 0, blocks: int = 1) -> Network:
    """LSTM whose gate input maps are ``format`` layers; optional dense classifier head."""
    fmt = Format.parse(format)
    if isinstance(ranks, (int, np.integer)):
        ranks = expand_ranks(fmt, ranks, len(in_modes), len(hidden_modes), False)
    cfg = fm.validate(TDConfig(fmt, in_modes, hidden_modes, () if fmt is Format.DENSE else ranks,
                               blocks=blocks if fmt is Format.BTT else 1))
    layers: list[Layer] = [TDLSTM(cfg, seed=[seed, 0])]
    if num_classes:
        layers.append(DenseLinear(cfg.out_size, num_classes, seed=[seed, 1]))
    kwargs = {"in_modes": list(in_modes), "hidden_modes": list(hidden_modes), "ranks": list(ranks),
              "format": fmt.value, "num_classes": num_classes, "seed": seed, "blocks": blocks}
    out = num_classes or cfg.out_size
    return Network("LSTM-CLASSIFIER", layers, (None, cfg.in_size), out, {"name": "lstm", "kwargs": kwargs})


_BUILDERS = {
    "demo": build_tr_demo_classifier,
    "lenet5": build_td_lenet5,
    "resnet": build_td_resnet,
    "lstm": build_td_lstm,
}


def build_network(builder: dict) -> Network:
    """Rebuild from the ``builder`` record stored in :attr:`Network.builder`."""
    try:
        fn = _BUILDERS[builder["name"]]
    except KeyError:
        raise ValueError(f"unknown builder {builder.get('name')!r}") from None
    return fn(**builder.get("kwargs", {}))
