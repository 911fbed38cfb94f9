"""Layer-level spiking simulation on top of the shared analog weight layers.

A :class:`SpikingLayer` wraps a :class:`~ptlsnn.nn.Dense` or
:class:`~ptlsnn.nn.Conv2d` and reuses its weights. Three roles exist:

``encode``
    first layer; evaluated in analog form and its ReLU output injected into
    IF neurons at the first step.
``spike``
    hidden IF layer driven by the previous layer's spike trains.
``readout``
    final layer; reports the free aggregate membrane potential of its
    neurons instead of spikes.

The previous layer's threshold is absorbed as ``input_scale``: a hidden layer
computes ``W @ (input_scale * s[t])``, which equals driving the spikes through
the absorbed weights ``input_scale * W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn.layers import Conv2d, Dense, _col2im
from ..nn.losses import sigmoid
from . import kernels
from .core import SpikeTrain

ROLES = ("encode", "spike", "readout")

# rows per im2col/matmul chunk when stacking time steps into the batch axis
_CHUNK_ROWS = 512


class ContractError(RuntimeError):
    """An operation was applied to a layer whose role does not support it."""


class SpikingLayer:
    def __init__(self, layer, role, n_steps, threshold=None, input_scale=1.0):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        if not isinstance(layer, (Dense, Conv2d)):
            raise TypeError(f"cannot convert layer of kind {getattr(layer, 'kind', type(layer).__name__)!r}")
        self.layer = layer
        self.role = role
        self.n_steps = int(n_steps)
        self.threshold = threshold
        self.input_scale = float(input_scale)
        # SNN-facing copies (quantized during QAT); None means "share the layer's own arrays"
        self.shared_W = None
        self.shared_b = None

    @property
    def W(self):
        return self.layer.W if self.shared_W is None else self.shared_W

    @property
    def b(self):
        return self.layer.b if self.shared_b is None else self.shared_b

    def effective_weight(self):
        """Weights as deployed on spikes, with the preceding threshold absorbed."""
        return (self.input_scale * self.W).astype(self.W.dtype)

    @property
    def injected_current(self):
        """Constant per-step current ``b / n_steps``."""
        return (self.b / self.n_steps).astype(self.b.dtype)

    def _require_threshold(self):
        if self.threshold is None:
            raise RuntimeError(f"{self.role} layer has no firing threshold set")
        return self.threshold

    def analog_pre(self, x):
        """Pre-activation of the coupled analog layer for analog-scale input ``x``."""
        return self.layer.linear(x, self.W, self.b)

    def _bias_shape(self, out_ndim):
        return (-1,) + (1,) * (out_ndim - 2) if isinstance(self.layer, Conv2d) else (-1,)

    def currents(self, spikes):
        """Per-step synaptic current ``W @ (input_scale * s[t]) + b / n_steps`` for spikes ``(T, B, ...)``."""
        T, B = spikes.shape[:2]
        flat = spikes.reshape((T * B,) + spikes.shape[2:])
        dtype = self.W.dtype
        scale = dtype.type(self.input_scale)
        per = max(1, _CHUNK_ROWS if isinstance(self.layer, Conv2d) else 8 * _CHUNK_ROWS)
        outs = []
        for i in range(0, T * B, per):
            x = flat[i : i + per].astype(dtype) * scale
            outs.append(self.layer.linear(x, self.W))
        z = np.concatenate(outs).reshape((T, B) + outs[0].shape[1:])
        z += self.injected_current.reshape(self._bias_shape(z.ndim - 1))
        return z

    def run(self, inp, backend=None):
        """Run the layer for one window.

        ``inp`` is the analog network input (``encode``) or the previous
        layer's :class:`SpikeTrain`. Returns a :class:`SpikeTrain`, or the
        free aggregate potential for ``readout``.
        """
        if self.role == "encode":
            a = np.maximum(self.analog_pre(inp), 0)
            spikes, _ = kernels.encode(a, self._require_threshold(), self.n_steps, backend=backend)
            return SpikeTrain(spikes)
        if self.role == "spike":
            thr = self._require_threshold()
            spikes, _, _ = kernels.integrate(self.currents(inp.spikes), thr, backend=backend)
            return SpikeTrain(spikes)
        return self.readout_potential(inp)

    def readout_potential(self, inp):
        """Free aggregate potential ``sum_j w_ij c_j + b_i`` from input spike counts."""
        if self.role != "readout":
            raise ContractError(f"readout_potential called on a {self.role} layer")
        counts = inp.counts if isinstance(inp, SpikeTrain) else np.asarray(inp)
        dtype = self.W.dtype
        return self.layer.linear(counts.astype(dtype) * dtype.type(self.input_scale), self.W, self.b)

    def fan_out_map(self, in_shape):
        """Number of synapses leaving each input neuron (ignores padding taps)."""
        if isinstance(self.layer, Dense):
            return np.full(in_shape, self.layer.out_features, dtype=np.int64)
        C, H, W = in_shape
        k, s, p = self.layer.kernel_size, self.layer.stride, self.layer.padding
        _, Ho, Wo = self.layer.output_shape(in_shape)
        ones = np.ones((Ho * Wo, C * k * k), dtype=np.int64)
        cover = _col2im(ones, (1, C, H, W), k, s, p, Ho, Wo)[0]
        return cover * self.layer.out_channels

    def __repr__(self):
        return f"SpikingLayer({self.layer!r}, role={self.role}, threshold={self.threshold}, scale={self.input_scale})"


@dataclass
class SpikingRecord:
    """Per-layer spike statistics collected during one forward pass over a batch."""

    counts: list = field(default_factory=list)
    synops: list = field(default_factory=list)
    n_samples: int = 0


class SpikingNet:
    """Fully converted spiking network: an encode layer, hidden IF layers, a readout."""

    def __init__(self, layers: list[SpikingLayer], input_shape, output_activation=None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.output_activation = output_activation

    @property
    def n_steps(self):
        return self.layers[0].n_steps

    def layer_input_shapes(self):
        shapes, shape = [], self.input_shape
        for sl in self.layers:
            shapes.append(shape)
            shape = sl.layer.output_shape(shape)
        return shapes

    def forward(self, x, record: SpikingRecord | None = None, backend=None):
        """Return readout potentials (or ``threshold * counts`` if the last layer spikes)."""
        shapes = self.layer_input_shapes()
        h = x
        for i, sl in enumerate(self.layers):
            h = sl.run(h, backend=backend)
            if record is not None and isinstance(h, SpikeTrain):
                counts = h.counts
                record.counts.append(counts)
                if i + 1 < len(self.layers):
                    nxt = self.layers[i + 1]
                    fan = nxt.fan_out_map(shapes[i + 1])
                    record.synops.append(int(np.sum(counts.astype(np.int64) * fan)))
        if isinstance(h, SpikeTrain):
            h = h.counts.astype(self.layers[-1].W.dtype) * self.layers[-1].threshold
        if record is not None:
            record.n_samples += len(x)
        return h

    __call__ = forward

    def predict(self, x, batch_size=128, output=True):
        outs = []
        for i in range(0, len(x), batch_size):
            out = self.forward(x[i : i + batch_size])
            outs.append(sigmoid(out) if (output and self.output_activation == "sigmoid") else out)
        return np.concatenate(outs)

    def thresholds(self):
        return [sl.threshold for sl in self.layers]


__all__ = ["ContractError", "SpikingLayer", "SpikingNet", "SpikingRecord"]
