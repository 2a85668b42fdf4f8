"""Self-check suites run by ``tdnets verify``.

Four suites, each reporting the largest error it observed:

* ``recon``: factorized layer forward against a dense forward with the
  reconstructed weight, every format, linear and conv.
* ``grad``: reverse-mode gradients against central differences for every
  recorded op, every TD layer kind and a short unrolled LSTM.
* ``count``: analytic parameter counts against the number of stored core
  elements on random configs.
* ``roundtrip``: checkpoint, IDX, permute/reshape and config serialization
  round trips (error is 0 when bitwise equal).
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import formats as fm
from . import tensor as tc
from .formats import Format, TDConfig, make_rng
from .layers import BatchNorm, Layer, TDConv2D, TDLinear

__all__ = ["SUITES", "FAULTS", "SuiteResult", "random_config", "run_suite", "run_verify", "layer_loss_fn",
           "conv2d_reference"]

SUITES = ("recon", "grad", "count", "roundtrip")
FAULTS = ("flip-core-sign",)
TD_FORMATS = (Format.CP, Format.TUCKER2, Format.BTT, Format.TT, Format.TR)

TOLERANCE = {"recon": 1e-10, "grad": 1e-4, "count": 0.0, "roundtrip": 0.0}


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    checks: int
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None


class _Tracker:
    def __init__(self, name: str):
        self.name = name
        self.tol = TOLERANCE[name]
        self.worst = 0.0
        self.checks = 0
        self.failure: str | None = None

    def record(self, err: float, what: str) -> None:
        err = float(err)
        self.checks += 1
        self.worst = max(self.worst, err) if math.isfinite(err) else math.inf
        if self.failure is None and not err <= self.tol:
            self.failure = f"{what}: error {err:.3e} exceeds {self.tol:g}"

    def result(self) -> SuiteResult:
        return SuiteResult(self.name, self.worst, self.tol, self.checks, self.failure)


def rel_err(got, want) -> float:
    got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
    if got.shape != want.shape:
        return math.inf
    if got.size == 0:
        return 0.0
    scale = np.max(np.abs(want))
    return float(np.max(np.abs(got - want)) / (scale if scale > 0 else 1.0))


# --- random configurations ---------------------------------------------------


def random_config(rng: np.random.Generator, fmt, conv: bool = False, max_modes: int = 3,
                  max_extent: int = 4, max_rank: int = 4) -> TDConfig:
    """A random valid config of ``fmt`` (small enough for dense oracles)."""
    fmt = Format.parse(fmt)
    d = int(rng.integers(1, max_modes + 1))
    k = d if fmt in (Format.TT, Format.BTT) else int(rng.integers(1, max_modes + 1))
    n = tuple(int(v) for v in rng.integers(1, max_extent + 1, d))
    m = tuple(int(v) for v in rng.integers(1, max_extent + 1, k))
    kernel = int(rng.choice([1, 2, 3])) if conv else None
    blocks = int(rng.integers(1, 4)) if fmt is Format.BTT else 1
    ranks: tuple[int, ...] = ()
    if fmt is not Format.DENSE:
        probe = TDConfig(fmt, n, m, (1,) * 64, kernel, blocks)
        length = fm.expected_rank_length(probe)
        ranks = tuple(int(v) for v in rng.integers(1, max_rank + 1, length))
    return fm.validate(TDConfig(fmt, n, m, ranks, kernel, blocks))


# --- oracles -----------------------------------------------------------------


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Direct convolution, one kernel offset at a time; ``kernel`` is [Cout, Cin, K, K]."""
    b, _, h, w = x.shape
    cout, _, k, _ = kernel.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, cout, oh, ow))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("bchw,oc->bohw", patch, kernel[:, :, i, j])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def _flip_first_core(layer: Layer) -> None:
    role = fm.core_shapes(layer.config)[0][0]
    layer.params[role] = tc.scale(layer.params[role], -1.0)


def _randomize_bias(layer: Layer, rng) -> None:
    if "bias" in layer.params:
        layer.params["bias"] = tc.DenseTensor(rng.standard_normal(layer.params["bias"].shape))


def _describe(cfg: TDConfig) -> str:
    kind = "conv" if cfg.is_conv else "linear"
    extra = f" K={cfg.kernel}" if cfg.is_conv else ""
    blocks = f" B={cfg.blocks}" if cfg.format is Format.BTT else ""
    return (f"{cfg.format.value} {kind} in={list(cfg.in_modes)} out={list(cfg.out_modes)} "
            f"ranks={list(cfg.ranks)}{extra}{blocks}")


def recon_errors(cfg: TDConfig, seed, fault: str | None = None) -> float:
    """Relative error of one factorized forward against its dense oracle."""
    rng = make_rng([*np.atleast_1d(seed), 99])
    if cfg.is_conv:
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        layer = TDConv2D(cfg, stride=stride, padding=padding, seed=seed)
        _randomize_bias(layer, rng)
        kernel = layer.kernel_tensor().numpy()
        bias = layer.params["bias"].numpy()
        size = max(cfg.kernel, 3) + int(rng.integers(0, 3))
        x = rng.standard_normal((2, cfg.in_size, size, size))
        want = conv2d_reference(x, kernel, bias, stride, padding)
    else:
        layer = TDLinear(cfg, seed=seed)
        _randomize_bias(layer, rng)
        w = fm.reconstruct(layer.coreset).numpy().reshape(cfg.in_size, cfg.out_size)
        x = rng.standard_normal((3, cfg.in_size))
        want = x @ w + layer.params["bias"].numpy()
    if fault == "flip-core-sign":
        _flip_first_core(layer)
    return rel_err(layer(x).numpy(), want)


# --- gradient checks ---------------------------------------------------------


def layer_loss_fn(layer: Layer, x: np.ndarray, training: bool = False, weights: np.ndarray | None = None):
    """``(f, params)`` for :func:`autodiff.check_gradients` over a layer's parameters.

    The loss is a fixed random projection of the layer output (or ``weights``
    if given), so every output entry contributes to the gradient.
    """
    params = {name: layer_.params[local] for name, layer_, local in layer.named_parameters()}
    holder: dict = {}

    def f(tape: ad.Tape, bound: dict) -> ad.Variable:
        tape.watched.update(bound)
        y = layer.forward(tape.constant(x), training)
        w = holder.get("w") if weights is None else weights
        if w is None:
            w = holder["w"] = make_rng(len(y.shape)).standard_normal(y.shape)
        return ad.contract_v(y, w, list(range(len(y.shape))), list(range(len(y.shape))))

    return f, params


def _op_cases(rng) -> list[tuple[str, Callable, dict]]:
    r = rng.standard_normal
    lbl = np.array([1, 0, 3, 2])

    def proj(v, seed=5):
        w = make_rng(seed).standard_normal(v.shape)
        return ad.contract_v(v, w, list(range(len(v.shape))), list(range(len(v.shape))))

    gamma, beta = r(3) + 1.5, r(3)
    # offsets keep inputs of the piecewise ops away from their kinks
    relu_in = np.sign(r((3, 4))) * (0.1 + np.abs(r((3, 4))))
    pool_in = np.arange(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.05 + 0.01 * r((2, 2, 4, 4))
    return [
        ("contract_v", lambda t, v: proj(ad.contract_v(v["a"], v["b"], [2], [0])), {"a": r((2, 3, 4)), "b": r((4, 3))}),
        ("permute_v", lambda t, v: proj(ad.permute_v(v["a"], [2, 0, 1])), {"a": r((2, 3, 4))}),
        ("reshape_v", lambda t, v: proj(ad.reshape_v(v["a"], [4, 6])), {"a": r((2, 3, 4))}),
        ("add_v", lambda t, v: proj(ad.add_v(v["a"], v["b"])), {"a": r((3, 2)), "b": r((3, 2))}),
        ("sub_v", lambda t, v: proj(ad.sub_v(v["a"], v["b"])), {"a": r((3, 2)), "b": r((3, 2))}),
        ("mul_v", lambda t, v: proj(ad.mul_v(v["a"], v["b"])), {"a": r((3, 2)), "b": r((3, 2))}),
        ("scale_v", lambda t, v: proj(ad.scale_v(v["a"], -1.7)), {"a": r((3, 2))}),
        ("sum_v", lambda t, v: ad.sum_v(ad.mul_v(v["a"], v["a"])), {"a": r((3, 2))}),
        ("relu_v", lambda t, v: proj(ad.relu_v(v["a"])), {"a": relu_in}),
        ("sigmoid_v", lambda t, v: proj(ad.sigmoid_v(v["a"])), {"a": 3 * r((3, 4))}),
        ("tanh_v", lambda t, v: proj(ad.tanh_v(v["a"])), {"a": 2 * r((3, 4))}),
        ("max_pool2d_v", lambda t, v: proj(ad.max_pool2d_v(v["a"], 2)), {"a": pool_in}),
        ("im2col_v", lambda t, v: proj(ad.im2col_v(v["a"], 3, 2, 1)), {"a": r((2, 2, 5, 5))}),
        ("batch_norm_v", lambda t, v: proj(ad.batch_norm_v(v["x"], v["g"], v["b"])),
         {"x": r((4, 3, 2, 2)), "g": gamma, "b": beta}),
        ("softmax_cross_entropy_v", lambda t, v: ad.softmax_cross_entropy_v(v["z"], lbl), {"z": r((4, 10))}),
    ]


def _grad_layer_configs() -> list[tuple[TDConfig, dict]]:
    out = []
    for fmt in TD_FORMATS:
        lin_in, lin_out = ((2, 3), (3, 2)) if fmt in (Format.TT, Format.BTT) else ((2, 3), (4,))
        probe = TDConfig(fmt, lin_in, lin_out, (1,) * 16)
        out.append((fm.validate(TDConfig(fmt, lin_in, lin_out, (2,) * fm.expected_rank_length(probe),
                                         blocks=2 if fmt is Format.BTT else 1)), {}))
        cin, cout = ((2,), (3,))
        probe = TDConfig(fmt, cin, cout, (1,) * 16, kernel=3)
        out.append((fm.validate(TDConfig(fmt, cin, cout, (2,) * fm.expected_rank_length(probe), kernel=3,
                                         blocks=2 if fmt is Format.BTT else 1)), {"stride": 2, "padding": 1}))
    return out


def gradient_cases(seed=0) -> list[tuple[str, Callable, dict]]:
    """Every ``(label, f, params)`` checked by the ``grad`` suite."""
    from .networks import TDLSTM

    rng = make_rng([*np.atleast_1d(seed), 7])
    cases = list(_op_cases(rng))
    for cfg, kw in _grad_layer_configs():
        if cfg.is_conv:
            layer: Layer = TDConv2D(cfg, seed=[*np.atleast_1d(seed), 1], **kw)
            x = rng.standard_normal((2, cfg.in_size, 5, 5))
        else:
            layer = TDLinear(cfg, seed=[*np.atleast_1d(seed), 2])
            x = rng.standard_normal((3, cfg.in_size))
        _randomize_bias(layer, rng)
        f, params = layer_loss_fn(layer, x)
        cases.append((_describe(cfg), f, params))
    bn = BatchNorm(3)
    bn.params = {"gamma": tc.DenseTensor(rng.standard_normal(3) + 1.5), "beta": tc.DenseTensor(rng.standard_normal(3))}
    f, params = layer_loss_fn(bn, rng.standard_normal((4, 3, 2, 2)), training=True)
    cases.append(("BatchNorm layer", f, params))
    lstm_cfg = fm.validate(TDConfig(Format.TR, (2, 2), (2, 2), (2, 2, 2, 2)))
    lstm = TDLSTM(lstm_cfg, seed=[*np.atleast_1d(seed), 3])
    lstm.assign_names()
    f, params = layer_loss_fn(lstm, rng.standard_normal((2, 3, 4)))
    cases.append(("TDLSTM 3 unrolled steps", f, params))
    return cases


# --- suites ------------------------------------------------------------------


def _suite_recon(seed, fault, n: int) -> SuiteResult:
    tr = _Tracker("recon")
    rng = make_rng([seed, 11])
    for fmt in TD_FORMATS:
        for conv in (False, True):
            for i in range(n):
                cfg = random_config(rng, fmt, conv)
                tr.record(recon_errors(cfg, [seed, i], fault), f"factorized forward == dense forward [{_describe(cfg)}]")
    return tr.result()


def _suite_grad(seed, fault, n: int) -> SuiteResult:
    tr = _Tracker("grad")
    for label, f, params in gradient_cases(seed):
        tr.record(ad.check_gradients(f, params, eps=1e-5), f"analytic gradient == finite differences [{label}]")
    return tr.result()


def _suite_count(seed, fault, n: int) -> SuiteResult:
    tr = _Tracker("count")
    rng = make_rng([seed, 13])
    for fmt in TD_FORMATS:
        for i in range(n):
            cfg = random_config(rng, fmt, conv=bool(i % 2), max_modes=4, max_extent=6, max_rank=5)
            stored = fm.init_cores(cfg, [seed, i], 1.0).num_elements()
            tr.record(float(abs(fm.param_count(cfg) - stored)), f"param_count == stored elements [{_describe(cfg)}]")
    return tr.result()


def _bitwise(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return math.inf
    return 0.0 if a.tobytes() == b.tobytes() else float(np.max(np.abs(a - b)) or math.inf)


def _suite_roundtrip(seed, fault, n: int) -> SuiteResult:
    from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
    from .mnist import load_mnist_idx, write_idx_images, write_idx_labels
    from .networks import build_td_lenet5, build_tr_demo_classifier

    tr = _Tracker("roundtrip")
    rng = make_rng([seed, 17])
    x = tc.DenseTensor(rng.standard_normal((2, 3, 4)))
    p = [2, 0, 1]
    back = tc.permute(tc.permute(x, p), tc.inverse_permutation(p))
    tr.record(_bitwise(back.array, x.array), "permute then inverse permute is bitwise identity")
    back = tc.reshape(tc.reshape(x, [4, 6]), [2, 3, 4])
    tr.record(_bitwise(back.array, x.array), "reshape round trip is bitwise identity")
    for fmt in TD_FORMATS:
        cfg = random_config(rng, fmt, conv=True)
        ok = TDConfig.from_dict(cfg.to_dict()) == cfg
        tr.record(0.0 if ok else math.inf, f"config dict round trip [{_describe(cfg)}]")
    with tempfile.TemporaryDirectory() as tmp:
        for net in (build_tr_demo_classifier(seed=seed), build_td_lenet5("tt", seed=seed)):
            path = os.path.join(tmp, "net.tdnc")
            save_checkpoint(net, path)
            loaded = load_checkpoint(path)
            for name, t in net.parameters().items():
                tr.record(_bitwise(loaded.parameters()[name].array, t.array), f"checkpoint parameter {name}")
            same = checkpoint_bytes(loaded) == open(path, "rb").read()
            tr.record(0.0 if same else math.inf, f"{net.arch} save-load-save byte identical")
        images = rng.integers(0, 256, (5, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, 5).astype(np.uint8)
        ip, lp = os.path.join(tmp, "img"), os.path.join(tmp, "lbl")
        write_idx_images(ip, images)
        write_idx_labels(lp, labels)
        ds = load_mnist_idx(ip, lp)
        tr.record(_bitwise(np.rint(ds.images[:, 0] * 255).astype(np.uint8), images), "IDX images round trip")
        tr.record(_bitwise(ds.labels, labels.astype(np.int64)), "IDX labels round trip")
    return tr.result()


_RUNNERS = {"recon": _suite_recon, "grad": _suite_grad, "count": _suite_count, "roundtrip": _suite_roundtrip}
_DEFAULT_N = {"recon": 4, "grad": 0, "count": 40, "roundtrip": 0}


def run_suite(name: str, seed: int = 0, fault: str | None = None, n: int | None = None) -> SuiteResult:
    if name not in _RUNNERS:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {', '.join(FAULTS)}")
    return _RUNNERS[name](seed, fault, _DEFAULT_N[name] if n is None else n)


def run_verify(suites=None, seed: int = 0, fault: str | None = None) -> list[SuiteResult]:
    return [run_suite(s, seed, fault) for s in (suites or SUITES)]
