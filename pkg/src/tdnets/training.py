"""Mini-batch training and evaluation."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .autodiff import Tape, backward, softmax_cross_entropy_v
from .errors import NumericalError, ShapeMismatch
from .formats import make_rng
from .mnist import Dataset
from .networks import Network
from .optim import make_optimizer

__all__ = ["train_step", "train_epochs", "evaluate", "predict_labels", "batch_loss"]


def _check(net: Network, data: Dataset) -> None:
    want = tuple(s for s in net.input_shape)
    got = tuple(data.images.shape[1:])
    if len(want) != len(got) or any(w is not None and w != g for w, g in zip(want, got)):
        raise ShapeMismatch(f"network expects inputs {list(want)}, data has {list(got)}")


def batch_loss(net: Network, images: np.ndarray, labels: np.ndarray, training: bool = False):
    """``(tape, loss Variable)`` for one batch."""
    tape = Tape()
    logits = net.forward(tape.constant(images), training)
    return tape, softmax_cross_entropy_v(logits, labels)


def train_step(net: Network, optimizer, images: np.ndarray, labels: np.ndarray) -> float:
    """One optimizer update; returns the batch loss before the update."""
    tape, loss = batch_loss(net, images, labels, training=True)
    grads = backward(tape, loss)
    params = net.parameters()
    g = {name: grads[tape.watched[name].node_id] for name in params}
    net.set_parameters(optimizer.step(params, g))
    return loss.value.item()


def predict_labels(net: Network, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits = net(images[start : start + batch_size], training=False).array
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, data: Dataset, batch_size: int = 500) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    _check(net, data)
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict_labels(net, data.images, batch_size) == data.labels))


def train_epochs(
    net: Network,
    data: Dataset,
    epochs: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    test: Dataset | None = None,
    optimizer: str = "adam",
    momentum: float = 0.9,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Shuffled mini-batch training with softmax cross-entropy.

    Each epoch shuffles with its own PCG64 stream keyed on ``(seed, epoch)``.
    Returns one record per epoch: mean training loss and test accuracy (on
    ``test`` if given, else ``None``). Raises NumericalError on a non-finite
    batch loss.
    """
    _check(net, data)
    opt = make_optimizer(optimizer, lr, momentum)
    history = []
    n = len(data)
    for epoch in range(1, epochs + 1):
        order = make_rng([seed, 1, epoch]).permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            loss = train_step(net, opt, data.images[idx], data.labels[idx])
            if not math.isfinite(loss):
                raise NumericalError(epoch, b, loss)
            total += loss * len(idx)
            count += len(idx)
        record = {
            "epoch": epoch,
            "loss": total / max(count, 1),
            "test_accuracy": evaluate(net, test) if test is not None else None,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history
