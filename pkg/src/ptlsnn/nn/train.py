"""Minibatch pre-training loop for :class:`AnalogNet`."""

from __future__ import annotations

import logging

import numpy as np

from .losses import loss_eval
from .net import AnalogNet
from .optim import Adam, StepDecay

log = logging.getLogger(__name__)


def iterate_minibatches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _loss_fn(loss):
    return loss if callable(loss) else (lambda out, y: loss_eval(loss, out, y))


def evaluate_loss(net: AnalogNet, x, y, loss="cross_entropy", batch_size=500):
    loss_fn = _loss_fn(loss)
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        out = net.forward(x[i : i + batch_size])
        l, _ = loss_fn(out, y[i : i + batch_size])
        total += l * len(out)
        count += len(out)
    return total / count


def train_analog(
    net: AnalogNet,
    x,
    y,
    epochs=10,
    batch_size=128,
    loss="cross_entropy",
    schedule: StepDecay | None = None,
    seed=0,
    x_val=None,
    y_val=None,
    callback=None,
):
    """Train ``net`` in place with Adam; returns a list of per-epoch dicts.

    ``loss`` is a loss name or a callable ``(output, target) -> (loss, grad)``.

    The shuffling RNG is derived from ``seed`` alone, so identical seeds and
    data give bit-identical parameters.
    """
    schedule = schedule or StepDecay()
    loss_fn = _loss_fn(loss)
    params = [p for _, _, p in net.parameters()]
    opt = Adam(params, lr=schedule(0))
    rng = np.random.Generator(np.random.Philox(seed))
    history = []
    for epoch in range(epochs):
        opt.lr = schedule(epoch)
        running, seen = 0.0, 0
        for idx in iterate_minibatches(len(x), batch_size, rng):
            if len(idx) < 2:
                continue
            out = net.forward(x[idx], train=True)
            l, g = loss_fn(out, y[idx])
            net.backward(g.astype(out.dtype, copy=False))
            opt.step(net.gradients())
            running += l * len(idx)
            seen += len(idx)
        rec = {"epoch": epoch, "train_loss": running / max(seen, 1), "lr": opt.lr}
        if x_val is not None:
            rec["val_loss"] = evaluate_loss(net, x_val, y_val, loss)
        history.append(rec)
        log.info("pretrain epoch %d %s", epoch, rec)
        if callback is not None:
            callback(rec)
    return history
