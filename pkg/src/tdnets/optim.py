"""SGD with momentum and Adam over name -> tensor dictionaries."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .tensor import DenseTensor

__all__ = ["sgd_step", "adam_step", "SGD", "Adam", "make_optimizer"]


def _arrays(params, grads):
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: parameter {list(p.shape)} vs gradient {list(g.shape)}")
        out[name] = (p, g)
    return out


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0, state: dict | None = None):
    """Returns ``(new_params, state)``; ``state`` holds the momentum buffers."""
    if not lr >= 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    bufs = {} if state is None else dict(state.get("momentum", {}))
    new = {}
    for name, (p, g) in _arrays(params, grads).items():
        if momentum:
            buf = bufs.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            bufs[name] = buf
            step = buf
        else:
            step = g
        new[name] = DenseTensor._wrap(p - lr * step)
    return new, {"momentum": bufs}


def adam_step(params: dict, grads: dict, state: dict | None = None, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Returns ``(new_params, state)`` with bias-corrected moment estimates."""
    if not lr >= 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    b1, b2 = betas
    state = {"t": 0, "m": {}, "v": {}} if state is None else state
    t = state["t"] + 1
    m_all, v_all = dict(state["m"]), dict(state["v"])
    new = {}
    for name, (p, g) in _arrays(params, grads).items():
        m = m_all.get(name)
        v = v_all.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        m_all[name], v_all[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new[name] = DenseTensor._wrap(p - lr * mhat / (np.sqrt(vhat) + eps))
    return new, {"t": t, "m": m_all, "v": v_all}


class SGD:
    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self.state: dict = {"momentum": {}}

    def step(self, params: dict, grads: dict) -> dict:
        new, self.state = sgd_step(params, grads, self.lr, self.momentum, self.state)
        return new


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state: dict = {"t": 0, "m": {}, "v": {}}

    def step(self, params: dict, grads: dict) -> dict:
        new, self.state = adam_step(params, grads, self.state, self.lr, self.betas, self.eps)
        return new


def make_optimizer(name: str, lr: float, momentum: float = 0.9):
    name = name.lower()
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}")
