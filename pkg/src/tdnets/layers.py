"""Dense and factorized layers.

Every parameterized layer implements the same four-part contract:

1. ``check_input(shape)`` validates an input shape and returns the output shape,
2. ``init_parameters(seed)`` builds the parameters the layer owns,
3. ``forward(x, training)`` maps a tape Variable to a tape Variable,
4. ``param_info()`` reports stored, dense-equivalent and compression counts.

Parameters are plain :class:`DenseTensor` values in ``layer.params``. During a
forward pass they are fetched through ``tape.watch`` under the layer's full
dotted name, so ``tape.watched`` maps names to leaf Variables afterwards.
"""

from __future__ import annotations

import math
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import formats as fm
from . import tensor as tc
from .autodiff import (
    Tape,
    Variable,
    add_v,
    batch_norm_v,
    contract_v,
    im2col_array,
    im2col_v,
    max_pool2d_v,
    permute_v,
    relu_v,
    reshape_v,
    traced_ops,
)
from .errors import InvalidConfig, KernelLargerThanInput, ShapeMismatch
from .formats import Format, TDConfig
from .tensor import DenseTensor

__all__ = [
    "ParamInfo",
    "Layer",
    "TDLinear",
    "TDConv2D",
    "DenseLinear",
    "DenseConv2D",
    "MaxPool2D",
    "BatchNorm",
    "ReLU",
    "Flatten",
    "GlobalAvgPool",
    "Sequential",
    "im2col",
    "conv_output_size",
    "layer_param_info",
]

Shape = tuple  # entries may be None for unknown extents


class ParamInfo(NamedTuple):
    """Counts for one layer or a whole model; biases included in the first two."""

    params: int
    dense_params: int
    format_params: int = 0
    dense_format_params: int = 0

    @property
    def cr(self) -> float:
        return self.dense_params / self.params if self.params else 1.0

    def __add__(self, other: "ParamInfo") -> "ParamInfo":  # type: ignore[override]
        return ParamInfo(*(a + b for a, b in zip(self, other)))


def layer_param_info(layer: "Layer") -> tuple[int, int, float]:
    """``(params, dense-equivalent params, CR)``, biases counted on both sides."""
    info = layer.param_info()
    return info.params, info.dense_params, info.cr


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x, kernel: int, stride: int = 1, padding: int = 0) -> DenseTensor:
    """Patch matrix ``[B*H'*W', C*K*K]`` of a ``[B, C, H, W]`` input."""
    x = tc.as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"im2col expects [B, C, H, W], got {list(x.shape)}")
    _, _, h, w = x.shape
    if min(h, w) + 2 * padding < kernel:
        raise KernelLargerThanInput(f"kernel {kernel} exceeds padded input {h}x{w} (padding {padding})")
    return DenseTensor._wrap(im2col_array(x.array, kernel, stride, padding))


def _ones(*shape) -> np.ndarray:
    return np.ones(shape)


class Layer:
    kind = "Layer"

    def __init__(self):
        self.name = ""
        self.params: dict[str, DenseTensor] = {}
        self.buffers: dict[str, DenseTensor] = {}

    # -- structure ---------------------------------------------------------

    def children(self) -> list["Layer"]:
        return []

    def assign_names(self, prefix: str = "") -> None:
        self.name = prefix
        for i, child in enumerate(self.children()):
            child.assign_names(f"{prefix}.{i}" if prefix else str(i))

    def _full(self, local: str) -> str:
        return f"{self.name}.{local}" if self.name else local

    def named_parameters(self) -> Iterator[tuple[str, "Layer", str]]:
        for local in self.params:
            yield self._full(local), self, local
        for child in self.children():
            yield from child.named_parameters()

    def named_buffers(self) -> Iterator[tuple[str, "Layer", str]]:
        for local in self.buffers:
            yield self._full(local), self, local
        for child in self.children():
            yield from child.named_buffers()

    def _param(self, x: Variable, local: str) -> Variable:
        return x.tape.watch(self._full(local), self.params[local])

    # -- contract ----------------------------------------------------------

    def check_input(self, shape: Shape) -> Shape:
        return tuple(shape)

    def init_parameters(self, seed=0) -> None:
        pass

    def forward(self, x: Variable, training: bool = False) -> Variable:
        raise NotImplementedError

    def param_info(self) -> ParamInfo:
        own = sum(t.size for t in self.params.values())
        info = ParamInfo(own, own)
        for child in self.children():
            info = info + child.param_info()
        return info

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __call__(self, x, training: bool = False) -> DenseTensor:
        """Evaluate on a throwaway tape; convenience for inference."""
        tape = Tape()
        return self.forward(tape.constant(x), training).value


class TDLinear(Layer):
    """Fully-connected layer whose ``I x O`` weight is stored as a CoreSet."""

    kind = "TDLinear"

    def __init__(self, config: TDConfig, bias: bool = True, seed=0):
        super().__init__()
        if config.is_conv:
            raise InvalidConfig("TDLinear needs a config without kernel")
        self.config = fm.validate(config)
        self.use_bias = bias
        self.plan = None if config.format is Format.DENSE else fm.contraction_plan(config)
        self.init_parameters(seed)

    @property
    def in_features(self) -> int:
        return self.config.in_size

    @property
    def out_features(self) -> int:
        return self.config.out_size

    def init_parameters(self, seed=0) -> None:
        target = math.sqrt(2.0 / self.in_features)
        cs = fm.init_cores(self.config, seed, target)
        self.params = {role: t for role, t in cs.cores}
        if self.use_bias:
            self.params["bias"] = tc.zeros([self.out_features])

    @property
    def coreset(self) -> fm.CoreSet:
        return fm.CoreSet(self.config, tuple((r, self.params[r]) for r, _ in fm.core_shapes(self.config)))

    def weight_matrix(self) -> DenseTensor:
        return tc.reshape(fm.reconstruct(self.coreset), [self.in_features, self.out_features])

    def check_input(self, shape: Shape) -> Shape:
        if len(shape) != 2 or shape[1] != self.in_features:
            raise ShapeMismatch(f"{self.kind} expects [batch, {self.in_features}], got {list(shape)}")
        return (shape[0], self.out_features)

    def forward(self, x: Variable, training: bool = False) -> Variable:
        self.check_input(x.shape)
        batch = x.shape[0]
        cores = [self._param(x, role) for role, _ in fm.core_shapes(self.config)]
        if self.plan is None:
            y = contract_v(x, cores[0], [1], [0])
        else:
            xr = reshape_v(x, (batch,) + self.config.in_modes)
            y = fm.apply_plan(self.plan, xr, cores, traced_ops)
        if self.use_bias:
            y = add_v(y, contract_v(_ones(batch), self._param(x, "bias"), [], []))
        return y

    def param_info(self) -> ParamInfo:
        fmt = fm.param_count(self.config)
        dense = fm.dense_param_count(self.config)
        b = self.out_features if self.use_bias else 0
        return ParamInfo(fmt + b, dense + b, fmt, dense)

    def describe(self) -> dict:
        return {"kind": self.kind, "config": self.config.to_dict(), "bias": self.use_bias}


class TDConv2D(Layer):
    """2-D convolution; the kernel is rebuilt from its cores on every forward."""

    kind = "TDConv2D"

    def __init__(self, config: TDConfig, stride: int = 1, padding: int = 0, bias: bool = True, seed=0):
        super().__init__()
        if not config.is_conv:
            raise InvalidConfig("TDConv2D needs a config with a kernel size")
        self.config = fm.validate(config)
        self.stride = int(stride)
        self.padding = int(padding)
        self.use_bias = bias
        self.init_parameters(seed)

    @property
    def in_channels(self) -> int:
        return self.config.in_size

    @property
    def out_channels(self) -> int:
        return self.config.out_size

    @property
    def kernel(self) -> int:
        return self.config.kernel

    def init_parameters(self, seed=0) -> None:
        target = math.sqrt(2.0 / (self.in_channels * self.kernel**2))
        cs = fm.init_cores(self.config, seed, target)
        self.params = {role: t for role, t in cs.cores}
        if self.use_bias:
            self.params["bias"] = tc.zeros([self.out_channels])

    @property
    def coreset(self) -> fm.CoreSet:
        return fm.CoreSet(self.config, tuple((r, self.params[r]) for r, _ in fm.core_shapes(self.config)))

    def kernel_tensor(self) -> DenseTensor:
        """Reconstructed kernel as ``[C_out, C_in, K, K]``."""
        k = self.kernel
        w = tc.reshape(fm.reconstruct(self.coreset), [k, k, self.in_channels, self.out_channels])
        return tc.permute(w, [3, 2, 0, 1])

    def check_input(self, shape: Shape) -> Shape:
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeMismatch(f"{self.kind} expects [batch, {self.in_channels}, H, W], got {list(shape)}")
        b, _, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        if h is not None and w is not None and min(h, w) + 2 * p < k:
            raise KernelLargerThanInput(f"kernel {k} exceeds padded input {h}x{w} (padding {p})")
        oh = None if h is None else conv_output_size(h, k, s, p)
        ow = None if w is None else conv_output_size(w, k, s, p)
        return (b, self.out_channels, oh, ow)

    def forward(self, x: Variable, training: bool = False) -> Variable:
        b, _, oh, ow = self.check_input(x.shape)
        k = self.kernel
        cin, cout = self.in_channels, self.out_channels
        cores = [self._param(x, role) for role, _ in fm.core_shapes(self.config)]
        w = fm.reconstruct_cores(self.config, cores, traced_ops)
        w = permute_v(reshape_v(w, (k, k, cin, cout)), [3, 2, 0, 1])
        wmat = reshape_v(w, (cout, cin * k * k))
        cols = im2col_v(x, k, self.stride, self.padding)
        y = contract_v(cols, wmat, [1], [1])
        if self.use_bias:
            y = add_v(y, contract_v(_ones(b * oh * ow), self._param(x, "bias"), [], []))
        return permute_v(reshape_v(y, (b, oh, ow, cout)), [0, 3, 1, 2])

    def param_info(self) -> ParamInfo:
        fmt = fm.param_count(self.config)
        dense = fm.dense_param_count(self.config)
        b = self.out_channels if self.use_bias else 0
        return ParamInfo(fmt + b, dense + b, fmt, dense)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.use_bias,
        }


class DenseLinear(TDLinear):
    kind = "DenseLinear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, seed=0):
        super().__init__(TDConfig(Format.DENSE, [in_features], [out_features]), bias=bias, seed=seed)


class DenseConv2D(TDConv2D):
    kind = "DenseConv2D"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, seed=0):
        cfg = TDConfig(Format.DENSE, [in_channels], [out_channels], kernel=kernel)
        super().__init__(cfg, stride=stride, padding=padding, bias=bias, seed=seed)


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def __init__(self, window: int = 2, stride: int | None = None):
        super().__init__()
        self.window = int(window)
        self.stride = self.window if stride is None else int(stride)

    def check_input(self, shape: Shape) -> Shape:
        if len(shape) != 4:
            raise ShapeMismatch(f"MaxPool2D expects [B, C, H, W], got {list(shape)}")
        b, c, h, w = shape
        size = lambda v: None if v is None else (v - self.window) // self.stride + 1  # noqa: E731
        if (h is not None and h < self.window) or (w is not None and w < self.window):
            raise ShapeMismatch(f"pool window {self.window} larger than input {h}x{w}")
        return (b, c, size(h), size(w))

    def forward(self, x: Variable, training: bool = False) -> Variable:
        return max_pool2d_v(x, self.window, self.stride)

    def describe(self) -> dict:
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x: Variable, training: bool = False) -> Variable:
        return relu_v(x)


class Flatten(Layer):
    kind = "Flatten"

    def check_input(self, shape: Shape) -> Shape:
        rest = shape[1:]
        return (shape[0], None if None in rest else math.prod(rest))

    def forward(self, x: Variable, training: bool = False) -> Variable:
        return reshape_v(x, (x.shape[0], math.prod(x.shape[1:])))


class GlobalAvgPool(Layer):
    """``[B, C, H, W] -> [B, C]`` by averaging each channel."""

    kind = "GlobalAvgPool"

    def check_input(self, shape: Shape) -> Shape:
        if len(shape) != 4:
            raise ShapeMismatch(f"GlobalAvgPool expects [B, C, H, W], got {list(shape)}")
        return tuple(shape[:2])

    def forward(self, x: Variable, training: bool = False) -> Variable:
        h, w = x.shape[2:]
        return contract_v(x, np.full((h, w), 1.0 / (h * w)), [2, 3], [0, 1])


class BatchNorm(Layer):
    """Batch normalization over axis 1 of ``[B, C]`` or ``[B, C, H, W]`` inputs."""

    kind = "BatchNorm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = int(num_features)
        self.eps = eps
        self.momentum = momentum
        self.init_parameters()

    def init_parameters(self, seed=0) -> None:
        c = self.num_features
        self.params = {"gamma": tc.ones([c]), "beta": tc.zeros([c])}
        self.buffers = {"running_mean": tc.zeros([c]), "running_var": tc.ones([c])}

    def check_input(self, shape: Shape) -> Shape:
        if len(shape) not in (2, 4) or shape[1] != self.num_features:
            raise ShapeMismatch(f"BatchNorm({self.num_features}) got input {list(shape)}")
        return tuple(shape)

    def forward(self, x: Variable, training: bool = False) -> Variable:
        self.check_input(x.shape)
        gamma, beta = self._param(x, "gamma"), self._param(x, "beta")
        if not training:
            return batch_norm_v(
                x, gamma, beta, self.eps, self.buffers["running_mean"].array, self.buffers["running_var"].array
            )
        X = x.array
        axes = (0,) + tuple(range(2, X.ndim))
        n = X.size // X.shape[1]
        mean = X.mean(axis=axes)
        unbiased = X.var(axis=axes) * (n / max(n - 1, 1))
        mom = self.momentum
        self.buffers = {
            "running_mean": DenseTensor._wrap((1 - mom) * self.buffers["running_mean"].array + mom * mean),
            "running_var": DenseTensor._wrap((1 - mom) * self.buffers["running_var"].array + mom * unbiased),
        }
        return batch_norm_v(x, gamma, beta, self.eps)

    def describe(self) -> dict:
        return {"kind": self.kind, "num_features": self.num_features}


class Sequential(Layer):
    kind = "Sequential"

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def children(self) -> list[Layer]:
        return self.layers

    def check_input(self, shape: Shape) -> Shape:
        for layer in self.layers:
            shape = layer.check_input(shape)
        return shape

    def forward(self, x: Variable, training: bool = False) -> Variable:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def describe(self) -> dict:
        return {"kind": self.kind, "layers": [layer.describe() for layer in self.layers]}
