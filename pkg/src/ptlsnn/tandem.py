"""Progressive tandem learning: convert and fine-tune one layer per stage.

At stage ``l`` the network is a hybrid of three parts:

* a frozen spiking prefix (layers ``1..l-1``),
* the coupled stage layer ``l``: its spiking twin produces the forward spike
  counts, while the analog layer sharing its weights provides gradients,
* an analog suffix (layers ``l+1..L``) fed with ``threshold * counts``.

The stage layer's gradient comes from the surrogate
``c_hat = relu(W @ (thr_prev * c_prev) + b) / thr``; the ``1/thr`` factor is
absorbed into the learning rate, so the gradient path is exactly the analog
layer evaluated at the actual spike-count input.

An adaptive patience scheduler decides when each stage ends. The best model of
the stage is restored, its stage layer frozen, and the next layer converted
with a threshold taken from the hybrid network's own activations.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .conversion import fold_network, percentile_upper_bound, threshold_layer_norm, weight_blocks
from .metrics import evaluate_metrics
from .nn.layers import BatchNorm, StateError
from .nn.losses import loss_eval, sigmoid
from .nn.net import AnalogNet
from .nn.optim import Adam, StepDecay
from .quantization import SharedWeights, WeightQuantSpec, quantize_layer
from .spiking import kernels
from .spiking.core import SpikeTrain
from .spiking.network import SpikingLayer, SpikingNet

log = logging.getLogger(__name__)


class BudgetExhaustedWarning(UserWarning):
    """The global epoch budget ran out before every stage was trained."""


def expected_spike_count(counts, weights, total_bias, threshold, n_steps=None):
    """Spike count predicted from input counts: ``relu(W @ c + B) / threshold``.

    ``total_bias`` is the whole-window injected current. The result is not
    clipped at ``n_steps``; clipping belongs to the simulation only. When
    ``n_steps`` is given the input counts are checked to lie in ``[0, n_steps]``.
    """
    counts = np.asarray(counts)
    if n_steps is not None and (np.any(counts < 0) or np.any(counts > n_steps)):
        raise ValueError(f"input counts must lie in [0, {n_steps}]")
    drive = counts @ np.atleast_2d(np.asarray(weights)).T + np.asarray(total_bias)
    return np.maximum(drive, 0) / threshold


# --------------------------------------------------------------------- scheduler


@dataclass
class SchedulerState:
    """Patience counter ``t``, best validation loss and the matching snapshot for one stage."""

    patience: int
    t: int = 0
    best_loss: float = math.inf
    snapshot: Any = None
    stage: int = 1
    epochs: int = 0

    def __post_init__(self):
        if int(self.patience) < 1:
            raise ValueError(f"patience period must be >= 1, got {self.patience}")


def scheduler_update(state: SchedulerState, val_loss, capture=None, restore=None):
    """Advance the scheduler by one epoch; returns ``(new_state, stage_done)``.

    Strict improvement resets ``t`` to 0 and stores ``capture()`` as the
    snapshot; anything else (ties and NaN included) increments ``t``. The stage
    is done when ``t`` reaches the patience period, at which point
    ``restore(snapshot)`` is called.
    """
    val_loss = float(val_loss)
    if val_loss < state.best_loss:
        snap = capture() if capture is not None else state.snapshot
        new = replace(state, t=0, best_loss=val_loss, snapshot=snap, epochs=state.epochs + 1)
    else:
        new = replace(state, t=state.t + 1, epochs=state.epochs + 1)
    done = new.t == new.patience
    if done and restore is not None and new.snapshot is not None:
        restore(new.snapshot)
    return new, done


def scripted_stage_ends(val_losses, patience, n_stages, stage_epoch_cap=None):
    """Replay a sequence of per-epoch validation losses through the scheduler.

    Returns the (1-based, global) epoch at which each stage ended. Losses are
    consumed in order across stages; a fresh scheduler starts every stage.
    """
    ends, epoch, it = [], 0, iter(val_losses)
    for stage in range(1, n_stages + 1):
        state = SchedulerState(patience, stage=stage)
        while True:
            try:
                loss = next(it)
            except StopIteration:
                raise ValueError("loss sequence ended before the last stage finished") from None
            epoch += 1
            state, done = scheduler_update(state, loss)
            if done or (stage_epoch_cap is not None and state.epochs >= stage_epoch_cap):
                ends.append(epoch)
                break
    return ends


# --------------------------------------------------------------------- hybrid network


class HybridNet:
    """Spiking prefix, one coupled stage layer, analog suffix.

    ``stage`` is 0 for the untouched analog network and ``l`` (1-based) while
    layer ``l`` is the coupled layer. After the last stage is frozen
    ``completed`` is set and the network is fully spiking.
    """

    def __init__(self, net: AnalogNet, n_steps, quant: WeightQuantSpec | None = None):
        if any(isinstance(layer, BatchNorm) for layer in net.layers):
            raise ValueError("fold batch norm before building a hybrid network")
        self.net = net
        self.blocks = weight_blocks(net)
        self.n_steps = int(n_steps)
        self.quant = quant or WeightQuantSpec(None)
        self.input_shape = net.input_shape
        self.output_activation = net.output_activation
        self.spiking: list[SpikingLayer] = []
        self.sharing: SharedWeights | None = None
        self.stage = 0
        self.completed = False
        self._cache = None
        shapes, shape = [], self.input_shape
        for layer in self.blocks:
            shapes.append(shape)
            shape = layer.output_shape(shape)
        self.block_input_shapes = shapes

    @property
    def n_layers(self):
        return len(self.blocks)

    @property
    def stage_layer(self) -> SpikingLayer | None:
        if self.stage == 0 or self.completed:
            return None
        return self.spiking[self.stage - 1]

    def thresholds(self):
        return [sl.threshold for sl in self.spiking]

    def _role(self, l):
        if self.n_layers == 1:
            return "encode"
        return "encode" if l == 1 else ("readout" if l == self.n_layers else "spike")

    # -- parameters

    def trainable_layers(self):
        """Weight layers updated at the current stage: the stage layer and the suffix."""
        if self.completed:
            return []
        return self.blocks[max(self.stage, 1) - 1 :]

    def trainable_parameters(self):
        return [layer.params[k] for layer in self.trainable_layers() for k in ("W", "b")]

    def capture(self):
        return [p.copy() for p in self.trainable_parameters()]

    def restore(self, snapshot):
        for p, s in zip(self.trainable_parameters(), snapshot):
            np.copyto(p, s)
        if self.sharing is not None:
            self.sharing.refresh()

    def refresh_shared(self):
        if self.sharing is not None:
            self.sharing.refresh()

    # -- forward

    def prefix_spikes(self, x, backend=None) -> SpikeTrain | None:
        """Output spike train of the frozen prefix (``None`` at stages 0 and 1)."""
        n_prefix = len(self.spiking) if self.completed else self.stage - 1
        if n_prefix <= 0:
            return None
        h = x
        for sl in self.spiking[:n_prefix]:
            h = sl.run(h, backend=backend)
        return h

    def _analog_input(self, l, prefix: SpikeTrain | None, x):
        if l == 1:
            return x
        dtype = self.blocks[l - 1].W.dtype
        return prefix.counts.astype(dtype) * dtype.type(self.spiking[l - 2].threshold)

    def forward(self, x, prefix: SpikeTrain | None = None, train=False, backend=None):
        """Network output (logits / pre-sigmoid) for input batch ``x``.

        ``prefix`` may carry precomputed prefix spikes for ``x``; otherwise the
        prefix is simulated. With ``train`` the state needed by
        :meth:`backward` is cached.
        """
        l = self.stage
        if l == 0:
            return self._suffix_forward(np.asarray(x), 1, train)
        if self.completed:
            return SpikingNet(self.spiking, self.input_shape).forward(x, backend=backend)
        sl = self.stage_layer
        if sl.role != "readout" and sl.threshold is None:
            raise StateError(f"stage layer {l} has no firing threshold")
        if prefix is None:
            prefix = self.prefix_spikes(x, backend=backend)
        x_in = self._analog_input(l, prefix, x)
        pre = sl.analog_pre(x_in)
        if sl.role == "readout":
            out, counts = pre, None
        else:
            if sl.role == "encode":
                spikes, _ = kernels.encode(np.maximum(pre, 0), sl.threshold, self.n_steps, backend=backend)
            else:
                spikes, _, _ = kernels.integrate(sl.currents(prefix.spikes), sl.threshold, backend=backend)
            counts = spikes.sum(axis=0, dtype=np.int32)
            dtype = pre.dtype
            u = counts.astype(dtype) * dtype.type(sl.threshold)
            out = self._suffix_forward(u, l + 1, train)
        self.last_stage_counts = counts
        if train:
            self._cache = (x_in, pre)
        return out

    def _suffix_forward(self, h, first, train):
        """Analog layers ``first..L`` (1-based) with ReLU between them."""
        masks = []
        for j in range(first, self.n_layers + 1):
            layer = self.blocks[j - 1]
            h = layer.forward(h, train=train) if train else layer.linear(h, layer.W, layer.b)
            if j < self.n_layers:
                mask = h > 0
                h = h * mask
                masks.append(mask)
        if train:
            self._suffix_masks = masks
            self._suffix_first = first
        return h

    # -- backward

    def backward(self, grad_out):
        """Gradients for :meth:`trainable_parameters`, in the same order."""
        if self._cache is None:
            raise StateError("backward called before a training forward pass")
        l = self.stage
        if l == 0:
            self._suffix_backward(grad_out)
            return [layer.grads[k] for layer in self.blocks for k in ("W", "b")]
        x_in, pre = self._cache
        sl = self.stage_layer
        if sl.role == "readout":
            g_pre = grad_out
            suffix = []
        else:
            g_u = self._suffix_backward(grad_out)
            g_pre = g_u * (pre > 0)
            suffix = [layer.grads[k] for layer in self.blocks[l:] for k in ("W", "b")]
        g = sl.layer.backward_input_free(g_pre.astype(pre.dtype, copy=False), x_in)
        self._cache = None
        return [g["W"], g["b"]] + suffix

    def _suffix_backward(self, g):
        first = self._suffix_first
        for j in range(self.n_layers, first - 1, -1):
            if j < self.n_layers:
                g = g * self._suffix_masks[j - first]
            g = self.blocks[j - 1].backward(g)
        return g

    # -- stage transitions

    def hybrid_activations(self, l, x, backend=None, batch_size=256):
        """Post-ReLU analog activations of layer ``l`` when fed by the current prefix."""
        layer = self.blocks[l - 1]
        outs = []
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            n_prefix = l - 1
            if n_prefix == 0:
                x_in = xb
            else:
                h = xb
                for sl in self.spiking[:n_prefix]:
                    h = sl.run(h, backend=backend)
                dtype = layer.W.dtype
                x_in = h.counts.astype(dtype) * dtype.type(self.spiking[n_prefix - 1].threshold)
            W, b = layer.W, layer.b
            if self.quant.enabled:
                W, b = quantize_layer(layer, self.quant)
            outs.append(np.maximum(layer.linear(x_in, W, b), 0))
        return np.concatenate(outs)

    def freeze_and_advance(self, calibration_x, percentile, backend=None):
        """Freeze the stage layer and couple the next one; returns ``True`` once fully spiking.

        The new layer's threshold is set from the hybrid network's activations
        on ``calibration_x`` (the readout layer needs none).
        """
        if self.completed:
            return True
        if self.stage > 0:
            sl = self.stage_layer
            self.refresh_shared()
            for arr in (sl.layer.params["W"], sl.layer.params["b"]):
                arr.setflags(write=False)
            if sl.shared_W is not None:
                sl.shared_W.setflags(write=False)
                sl.shared_b.setflags(write=False)
            self.sharing = None
        if self.stage == self.n_layers:
            self.completed = True
            return True
        l = self.stage + 1
        role = self._role(l)
        threshold = None
        if role != "readout":
            ub = percentile_upper_bound(self.hybrid_activations(l, calibration_x, backend=backend), percentile)
            threshold = threshold_layer_norm(ub, self.n_steps)
        scale = self.spiking[-1].threshold if l > 1 else 1.0
        sl = SpikingLayer(self.blocks[l - 1], role, self.n_steps, threshold, input_scale=scale)
        self.spiking.append(sl)
        self.sharing = SharedWeights(sl, self.quant)
        self.stage = l
        return False

    def to_spiking_net(self) -> SpikingNet:
        if not self.completed:
            raise StateError(f"network is still at stage {self.stage}; finish every stage first")
        return SpikingNet(list(self.spiking), self.input_shape, output_activation=self.output_activation)


# --------------------------------------------------------------------- prefix cache


class PrefixCache:
    """Bit-packed prefix spike trains for a fixed dataset at one stage.

    The prefix is frozen for the whole stage, so its output is simulated once.
    If the packed trains would exceed ``budget_bytes`` they are recomputed per
    batch instead.
    """

    def __init__(self, hybrid: HybridNet, x, budget_bytes=1.5e9, batch_size=256, backend=None):
        self.hybrid = hybrid
        self.x = x
        self.backend = backend
        self.packed = None
        l = hybrid.stage
        if l <= 1 or hybrid.completed:
            return
        self.shape = hybrid.block_input_shapes[l - 1]
        T = hybrid.n_steps
        self.bits = T * int(np.prod(self.shape))
        if len(x) * math.ceil(self.bits / 8) > budget_bytes:
            log.info("prefix cache over budget at stage %d; recomputing per batch", l)
            return
        chunks = []
        for i in range(0, len(x), batch_size):
            s = hybrid.prefix_spikes(x[i : i + batch_size], backend=backend).spikes
            s = np.moveaxis(s, 0, 1).reshape(s.shape[1], -1)
            chunks.append(np.packbits(s, axis=1))
        self.packed = np.concatenate(chunks)

    def get(self, idx) -> SpikeTrain | None:
        if self.hybrid.stage <= 1:
            return None
        if self.packed is None:
            return self.hybrid.prefix_spikes(self.x[idx], backend=self.backend)
        rows = np.unpackbits(self.packed[idx], axis=1, count=self.bits)
        s = rows.reshape((len(rows), self.hybrid.n_steps) + tuple(self.shape))
        return SpikeTrain(np.ascontiguousarray(np.moveaxis(s, 1, 0)))


# --------------------------------------------------------------------- training loop


def resolve_loss(loss) -> Callable:
    if callable(loss):
        return loss
    return lambda out, y: loss_eval(loss, out, y)


def default_metric(loss):
    """Validation metric matching a named loss: accuracy for classification, MSE otherwise."""
    if loss == "cross_entropy":
        return lambda out, y: evaluate_metrics("accuracy", out, y)
    if loss == "sigmoid_mse":
        return lambda out, y: evaluate_metrics("mse", sigmoid(out), y)
    if loss == "mse":
        return lambda out, y: evaluate_metrics("mse", out, y)
    return lambda out, y: float("nan")


def evaluate_hybrid(hybrid: HybridNet, x, y, loss_fn, metric_fn, cache: PrefixCache | None = None, batch_size=256):
    """Size-weighted mean loss and metric of the hybrid network over ``(x, y)``."""
    tot_loss = tot_metric = 0.0
    for i in range(0, len(x), batch_size):
        idx = np.arange(i, min(i + batch_size, len(x)))
        prefix = cache.get(idx) if cache is not None else None
        out = hybrid.forward(x[idx], prefix=prefix)
        l, _ = loss_fn(out, y[idx])
        tot_loss += l * len(idx)
        tot_metric += metric_fn(out, y[idx]) * len(idx)
    return tot_loss / len(x), tot_metric / len(x)


@dataclass
class PTLResult:
    snn: SpikingNet
    hybrid: HybridNet
    log: list = field(default_factory=list)
    epochs_used: int = 0


def ptl_train(
    pretrained: AnalogNet,
    x_train,
    y_train,
    x_val,
    y_val,
    n_steps,
    patience,
    *,
    loss="cross_entropy",
    metric=None,
    percentile=99.9,
    calibration_size=512,
    epoch_budget=100,
    stage_epoch_cap=20,
    batch_size=128,
    schedule: StepDecay | None = None,
    quant: WeightQuantSpec | None = None,
    seed=0,
    log_path=None,
    on_record=None,
    cache_budget_bytes=1.5e9,
    backend=None,
) -> PTLResult:
    """Convert ``pretrained`` layer by layer and fine-tune each stage.

    The input network is not modified (batch norm is folded into a copy).
    Each stage trains the coupled layer and the analog suffix with a fresh
    Adam state until the patience scheduler (or ``stage_epoch_cap``) ends it;
    the learning rate follows ``schedule`` over the global epoch count. If
    ``epoch_budget`` runs out, the current stage keeps its best snapshot and
    the remaining layers are converted without training.

    Every stage starts with a record at ``epoch 0`` (the freshly converted
    network) followed by one record per training epoch.
    """
    net = fold_network(pretrained)
    hybrid = HybridNet(net, n_steps, quant)
    schedule = schedule or StepDecay()
    loss_fn = resolve_loss(loss)
    metric_fn = metric or default_metric(loss)
    rng = np.random.Generator(np.random.Philox(seed))
    calib = x_train[np.sort(rng.choice(len(x_train), size=min(calibration_size, len(x_train)), replace=False))]
    records: list[dict] = []
    sink = open(log_path, "w") if log_path else None
    global_epoch = 0

    def emit(rec):
        records.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()
        if on_record is not None:
            on_record(rec)
        log.info("ptl %s", rec)

    try:
        hybrid.freeze_and_advance(calib, percentile, backend=backend)
        while not hybrid.completed:
            stage = hybrid.stage
            train_cache = PrefixCache(hybrid, x_train, cache_budget_bytes, backend=backend)
            val_cache = PrefixCache(hybrid, x_val, cache_budget_bytes, backend=backend)
            v_loss, v_metric = evaluate_hybrid(hybrid, x_val, y_val, loss_fn, metric_fn, val_cache)
            emit(dict(stage=stage, epoch=0, train_loss=None, val_loss=v_loss, val_metric=v_metric, patience_t=None, global_epoch=global_epoch))
            if global_epoch >= epoch_budget:
                warnings.warn(f"epoch budget exhausted; stage {stage} converted without training", BudgetExhaustedWarning, stacklevel=2)
                hybrid.freeze_and_advance(calib, percentile, backend=backend)
                continue
            params = hybrid.trainable_parameters()
            opt = Adam(params, lr=schedule(global_epoch))
            state = SchedulerState(patience, stage=stage)
            while True:
                opt.lr = schedule(global_epoch)
                running, seen = 0.0, 0
                for idx in np.array_split(rng.permutation(len(x_train)), max(1, math.ceil(len(x_train) / batch_size))):
                    idx = np.sort(idx)
                    out = hybrid.forward(x_train[idx], prefix=train_cache.get(idx), train=True, backend=backend)
                    l, g = loss_fn(out, y_train[idx])
                    grads = hybrid.backward(np.asarray(g, dtype=out.dtype))
                    opt.step(grads)
                    hybrid.refresh_shared()
                    running += l * len(idx)
                    seen += len(idx)
                global_epoch += 1
                v_loss, v_metric = evaluate_hybrid(hybrid, x_val, y_val, loss_fn, metric_fn, val_cache)
                state, done = scheduler_update(state, v_loss, hybrid.capture, hybrid.restore)
                emit(dict(stage=stage, epoch=state.epochs, train_loss=running / max(seen, 1), val_loss=v_loss, val_metric=v_metric, patience_t=state.t, global_epoch=global_epoch))
                if done:
                    break
                if state.epochs >= stage_epoch_cap or global_epoch >= epoch_budget:
                    if global_epoch >= epoch_budget and not state.epochs >= stage_epoch_cap:
                        warnings.warn(f"epoch budget exhausted during stage {stage}; keeping its best snapshot", BudgetExhaustedWarning, stacklevel=2)
                    if state.snapshot is not None:
                        hybrid.restore(state.snapshot)
                    break
            hybrid.freeze_and_advance(calib, percentile, backend=backend)
    finally:
        if sink is not None:
            sink.close()
    return PTLResult(hybrid.to_spiking_net(), hybrid, records, global_epoch)


def stage_summary(records):
    """Per-stage ``(first val_metric, best val_metric, epochs)`` from a stage log."""
    out = {}
    for r in records:
        s = out.setdefault(r["stage"], {"start": None, "values": [], "epochs": 0})
        if r["epoch"] == 0:
            s["start"] = r["val_metric"]
        else:
            s["values"].append(r["val_metric"])
            s["epochs"] = r["epoch"]
    return out


__all__ = [
    "BudgetExhaustedWarning",
    "HybridNet",
    "PTLResult",
    "PrefixCache",
    "SchedulerState",
    "evaluate_hybrid",
    "expected_spike_count",
    "ptl_train",
    "scheduler_update",
    "scripted_stage_ends",
    "stage_summary",
]
