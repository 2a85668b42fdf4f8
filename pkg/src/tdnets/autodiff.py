"""Tape-based reverse-mode differentiation over the tensor kernels.

Usage::

    tape = Tape()
    w = tape.variable(w0)
    x = tape.constant(x0)
    loss = softmax_cross_entropy_v(contract_v(x, w, [1], [0]), labels)
    grads = backward(tape, loss)      # node_id -> DenseTensor
    grads[w.node_id]

Every recorded op accepts Variables or plain tensors/arrays; plain operands
are lifted to constants on the tape of the first Variable argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .errors import LabelOutOfRange, NonScalarLoss, ShapeMismatch
from .tensor import DenseTensor, _contract_arrays, inverse_permutation

__all__ = [
    "Tape",
    "Variable",
    "backward",
    "check_gradients",
    "contract_v",
    "permute_v",
    "reshape_v",
    "add_v",
    "sub_v",
    "mul_v",
    "scale_v",
    "sum_v",
    "relu_v",
    "sigmoid_v",
    "tanh_v",
    "max_pool2d_v",
    "batch_norm_v",
    "softmax_cross_entropy_v",
    "im2col_v",
    "traced_ops",
]

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: BackwardFn | None
    requires_grad: bool


class Variable:
    """A value recorded on a tape."""

    __slots__ = ("tape", "node_id", "value", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, value: DenseTensor, requires_grad: bool):
        self.tape = tape
        self.node_id = node_id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def __repr__(self) -> str:
        return f"Variable(id={self.node_id}, shape={list(self.shape)}, requires_grad={self.requires_grad})"


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    values: list[DenseTensor] = field(default_factory=list)
    watched: dict[Hashable, Variable] = field(default_factory=dict)

    def _push(self, value: DenseTensor, op: str, inputs, backward, requires_grad: bool) -> Variable:
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), backward, requires_grad))
        self.values.append(value)
        return Variable(self, node_id, value, requires_grad)

    def variable(self, value, requires_grad: bool = True) -> Variable:
        return self._push(tc.as_tensor(value), "leaf", (), None, requires_grad)

    def constant(self, value) -> Variable:
        return self.variable(value, requires_grad=False)

    def watch(self, key: Hashable, value) -> Variable:
        """Leaf variable for a named parameter, created once per tape."""
        var = self.watched.get(key)
        if var is None:
            var = self.watched[key] = self.variable(value)
        return var

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Variable):
            return x.tape
    raise TypeError("at least one operand must be a Variable")


def _lift(tape: Tape, x) -> Variable:
    if isinstance(x, Variable):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Variable], backward: BackwardFn) -> Variable:
    tape = inputs[0].tape
    rg = any(v.requires_grad for v in inputs)
    return tape._push(
        DenseTensor._wrap(out), op, [v.node_id for v in inputs], backward if rg else None, rg
    )


def backward(tape: Tape, loss: Variable) -> dict[int, DenseTensor]:
    """Gradients of a scalar ``loss`` w.r.t. every node that requires grad.

    Leaves that require grad but are unreachable from the loss get zeros.
    """
    if loss.shape != ():
        raise NonScalarLoss(f"loss must have shape [], got {list(loss.shape)}")
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.ones(())
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or node.backward is None:
            continue
        in_grads = node.backward(g)
        for src, ig in zip(node.inputs, in_grads):
            if ig is None or not nodes[src].requires_grad:
                continue
            prev = grads.get(src)
            grads[src] = ig if prev is None else prev + ig
    out = {}
    for nid, node in enumerate(nodes):
        if not node.requires_grad:
            continue
        if nid in grads:
            out[nid] = DenseTensor._wrap(np.array(grads[nid], dtype=np.float64))
        elif node.op == "leaf":
            out[nid] = tc.zeros(tape.values[nid].shape)
    return out


# --- linear algebra -------------------------------------------------------


def contract_v(a, b, axes_a: Sequence[int], axes_b: Sequence[int]) -> Variable:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    A, B = a.array, b.array
    axes_a, axes_b = tuple(int(i) for i in axes_a), tuple(int(j) for j in axes_b)
    out = _contract_arrays(A, B, axes_a, axes_b)
    free_a = [i for i in range(A.ndim) if i not in axes_a]
    free_b = [j for j in range(B.ndim) if j not in axes_b]
    na = len(free_a)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            r = _contract_arrays(g, B, range(na, na + len(free_b)), free_b)
            labels = free_a + [axes_a[axes_b.index(j)] for j in sorted(axes_b)]
            ga = np.asarray(np.transpose(r, [labels.index(q) for q in range(A.ndim)]), order="C")
        if b.requires_grad:
            r = _contract_arrays(A, g, free_a, range(na))
            labels = [axes_b[axes_a.index(i)] for i in sorted(axes_a)] + free_b
            gb = np.asarray(np.transpose(r, [labels.index(q) for q in range(B.ndim)]), order="C")
        return ga, gb

    return _record("contract", out, [a, b], bw)


def permute_v(a: Variable, order: Sequence[int]) -> Variable:
    out = tc.permute(a.value, order)
    inv = inverse_permutation(tuple(order))
    return _record("permute", out.array, [a], lambda g: (np.asarray(np.transpose(g, inv), order="C"),))


def reshape_v(a: Variable, new_shape: Sequence[int]) -> Variable:
    shape = a.shape
    out = tc.reshape(a.value, new_shape)
    return _record("reshape", out.array, [a], lambda g: (g.reshape(shape),))


def _binary(op: str, a, b) -> tuple[Variable, Variable]:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op} on {list(a.shape)} and {list(b.shape)}")
    return a, b


def add_v(a, b) -> Variable:
    a, b = _binary("add", a, b)
    return _record("add", a.array + b.array, [a, b], lambda g: (g, g))


def sub_v(a, b) -> Variable:
    a, b = _binary("sub", a, b)
    return _record("sub", a.array - b.array, [a, b], lambda g: (g, -g))


def mul_v(a, b) -> Variable:
    a, b = _binary("mul", a, b)
    A, B = a.array, b.array
    return _record("mul", A * B, [a, b], lambda g: (g * B, g * A))


def scale_v(a: Variable, s: float) -> Variable:
    s = float(s)
    return _record("scale", a.array * s, [a], lambda g: (g * s,))


def sum_v(a: Variable) -> Variable:
    shape = a.shape
    return _record("sum", np.array(a.array.sum()), [a], lambda g: (np.full(shape, float(g)),))


# --- nonlinearities -------------------------------------------------------


def relu_v(a: Variable) -> Variable:
    mask = a.array > 0
    return _record("relu", np.where(mask, a.array, 0.0), [a], lambda g: (g * mask,))


def sigmoid_v(a: Variable) -> Variable:
    x = a.array
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", y, [a], lambda g: (g * y * (1.0 - y),))


def tanh_v(a: Variable) -> Variable:
    y = np.tanh(a.array)
    return _record("tanh", y, [a], lambda g: (g * (1.0 - y * y),))


# --- pooling / normalization ----------------------------------------------


def max_pool2d_v(a: Variable, window: int, stride: int | None = None) -> Variable:
    """Max pooling over the last two axes of a ``[B, C, H, W]`` input.

    Ties go to the lowest flat index inside the window.
    """
    stride = window if stride is None else stride
    x = a.array
    if x.ndim != 4:
        raise ShapeMismatch(f"max_pool2d expects [B, C, H, W], got {list(x.shape)}")
    bsz, ch, h, w = x.shape
    if h < window or w < window:
        raise ShapeMismatch(f"pool window {window} larger than input {h}x{w}")
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    best = None
    arg = np.zeros((bsz, ch, oh, ow), dtype=np.intp)
    for ki in range(window):
        for kj in range(window):
            win = x[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            if best is None:
                best = win.copy()
                continue
            better = win > best
            best = np.where(better, win, best)
            arg[better] = ki * window + kj

    def bw(g):
        gx = np.zeros_like(x)
        for ki in range(window):
            for kj in range(window):
                sel = arg == ki * window + kj
                gx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += np.where(sel, g, 0.0)
        return (gx,)

    return _record("max_pool2d", best, [a], bw)


def _bn_axes(ndim: int) -> tuple[int, ...]:
    return (0,) + tuple(range(2, ndim))


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm_v(
    x: Variable,
    gamma,
    beta,
    eps: float = 1e-5,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
) -> Variable:
    """Per-channel normalization over all axes except axis 1.

    With ``mean``/``var`` given (inference), those statistics are treated as
    constants. Otherwise the biased batch statistics are used and
    differentiated through.
    """
    tape = _tape_of(x, gamma, beta)
    x, gamma, beta = _lift(tape, x), _lift(tape, gamma), _lift(tape, beta)
    X = x.array
    if X.ndim < 2 or gamma.shape != (X.shape[1],) or beta.shape != (X.shape[1],):
        raise ShapeMismatch(
            f"batch_norm on {list(X.shape)} with gamma {list(gamma.shape)}, beta {list(beta.shape)}"
        )
    axes = _bn_axes(X.ndim)
    training = mean is None
    if training:
        mean = X.mean(axis=axes)
        var = X.var(axis=axes)
    inv_std = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (X - _bn_view(np.asarray(mean), X.ndim)) * _bn_view(inv_std, X.ndim)
    G = _bn_view(gamma.array, X.ndim)
    out = xhat * G + _bn_view(beta.array, X.ndim)
    count = X.size // X.shape[1]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * G
        if training:
            s1 = _bn_view(dxhat.sum(axis=axes), X.ndim)
            s2 = _bn_view((dxhat * xhat).sum(axis=axes), X.ndim)
            dx = (dxhat - s1 / count - xhat * s2 / count) * _bn_view(inv_std, X.ndim)
        else:
            dx = dxhat * _bn_view(inv_std, X.ndim)
        return dx, dgamma, dbeta

    return _record("batch_norm", out, [x, gamma, beta], bw)


# --- loss -----------------------------------------------------------------


def softmax_cross_entropy_v(logits: Variable, labels) -> Variable:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    Z = logits.array
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if Z.ndim != 2 or labels.shape[0] != Z.shape[0]:
        raise ShapeMismatch(f"logits {list(Z.shape)} vs {labels.shape[0]} labels")
    bsz, classes = Z.shape
    if bsz and (labels.min() < 0 or labels.max() >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(bsz)
    loss = (lse - shifted[rows, labels]).mean() if bsz else 0.0
    probs = np.exp(shifted - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / bsz),)

    return _record("softmax_ce", np.array(loss), [logits], bw)


# --- convolution support --------------------------------------------------


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col_array(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    bsz, ch, h, w = x.shape
    oh, ow = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((bsz, oh, ow, ch, k, k))
    for ki in range(k):
        for kj in range(k):
            patch = x[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            cols[:, :, :, :, ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(bsz * oh * ow, ch * k * k)


def col2im_array(cols: np.ndarray, x_shape, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    bsz, ch, h, w = x_shape
    oh, ow = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    c6 = cols.reshape(bsz, oh, ow, ch, k, k)
    out = np.zeros((bsz, ch, h + 2 * padding, w + 2 * padding))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += c6[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.asarray(out, order="C")


def im2col_v(x: Variable, k: int, stride: int = 1, padding: int = 0) -> Variable:
    """Unfold ``[B, C, H, W]`` into ``[B*H'*W', C*k*k]``; columns ordered (c, ki, kj)."""
    X = x.array
    shape = X.shape
    cols = im2col_array(X, k, stride, padding)
    return _record("im2col", cols, [x], lambda g: (col2im_array(g, shape, k, stride, padding),))


traced_ops = SimpleNamespace(
    contract=contract_v,
    permute=permute_v,
    reshape=reshape_v,
    add=add_v,
    scale=scale_v,
)


def check_gradients(
    f: Callable[[Tape, dict[str, Variable]], Variable],
    params: Mapping[str, object],
    eps: float = 1e-5,
) -> float:
    """Max over all parameter entries of ``|analytic - central| / max(1, |central|)``."""
    params = {k: np.array(tc.as_tensor(v).array) for k, v in params.items()}
    tape = Tape()
    bound = {k: tape.variable(v) for k, v in params.items()}
    grads = backward(tape, f(tape, bound))

    def loss_at(p):
        t = Tape()
        return f(t, {k: t.variable(v) for k, v in p.items()}).value.item()

    worst = 0.0
    for name, value in params.items():
        analytic = grads[bound[name].node_id].array.reshape(-1)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at(params)
            flat[i] = orig - eps
            down = loss_at(params)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
