"""Primitive ANN-to-SNN conversion.

The pipeline is: fold batch norm into the preceding weight layer, pick a
per-layer activation upper bound from a calibration batch (nearest-rank
percentile), set each firing threshold to ``upper_bound / n_steps``, split
biases into per-step currents, and absorb every threshold into the next
layer's incoming weights.

Activation quantization and spike-count discretization share one rounding
rule (round half to even, ``numpy.rint``).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .nn.layers import BatchNorm, Conv2d, Dense, ReLU
from .nn.net import AnalogNet
from .spiking.network import SpikingLayer, SpikingNet


class DegenerateLayerError(ValueError):
    """A layer's activation upper bound is not positive (all-dead layer)."""


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Uniform quantization range ``[0, upper]`` with ``levels`` steps of size ``upper / levels``."""

    upper: float
    levels: int

    def __post_init__(self):
        if not self.upper > 0:
            raise DegenerateLayerError(f"upper bound must be > 0, got {self.upper}")
        if int(self.levels) < 1:
            raise ValueError("levels must be >= 1")

    @property
    def scale(self):
        return self.upper / self.levels


def quantize_activation(a, spec: QuantSpec):
    """Clamp to ``[0, upper]``, divide by the scale, round half to even, rescale."""
    a = np.asarray(a, dtype=np.float64)
    clipped = np.minimum(np.maximum(a, 0.0), spec.upper)
    out = np.rint(clipped / spec.scale) * spec.scale
    return out if out.ndim else float(out)


def discretize_potential(V, spec: QuantSpec):
    """Spike-count view of the same map: returns ``(quantized potential, implied count)``."""
    V = np.asarray(V, dtype=np.float64)
    clipped = np.minimum(np.maximum(V, 0.0), spec.upper)
    count = np.rint(clipped / spec.scale)
    q = count * spec.scale
    if q.ndim == 0:
        return float(q), int(count)
    return q, count.astype(np.int64)


def percentile_upper_bound(activations, p):
    """Nearest-rank ``p``-th percentile of the flattened activations."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    flat = np.asarray(activations).reshape(-1)
    if flat.size == 0:
        raise ValueError("empty activation set")
    rank = max(1, math.ceil(p / 100.0 * flat.size))
    return float(np.partition(flat, rank - 1)[rank - 1])


def threshold_layer_norm(upper_bound, n_steps):
    if not upper_bound > 0:
        raise DegenerateLayerError(
            f"activation upper bound is {upper_bound}; the layer never activates on the calibration batch"
        )
    return float(upper_bound) / int(n_steps)


def fold_batchnorm(layer, bn: BatchNorm):
    """Return a copy of ``layer`` with ``bn`` (inference statistics) folded in."""
    n_out = layer.out_channels if isinstance(layer, Conv2d) else layer.out_features
    if bn.num_features != n_out:
        raise ValueError(f"batchnorm has {bn.num_features} features, layer has {n_out} outputs")
    folded = copy.deepcopy(layer)
    folded._cache = None
    dtype = layer.W.dtype
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    shape = (-1,) + (1,) * (layer.W.ndim - 1)
    folded.params["W"] = (layer.W.astype(np.float64) * scale.reshape(shape)).astype(dtype)
    b = (layer.b.astype(np.float64) - bn.running_mean) * scale + bn.beta
    folded.params["b"] = b.astype(dtype)
    return folded


def fold_network(net: AnalogNet) -> AnalogNet:
    """Copy of ``net`` with every batch norm folded into its preceding weight layer."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            if not layers or not isinstance(layers[-1], (Dense, Conv2d)):
                raise ConversionError("batchnorm must directly follow a dense or conv layer")
            layers[-1] = fold_batchnorm(layers[-1], layer)
        else:
            c = copy.deepcopy(layer)
            c._cache = None
            layers.append(c)
    return AnalogNet(layers, net.input_shape, output_activation=net.output_activation)


def weight_blocks(net: AnalogNet):
    """Validate a folded net as ``[W, ReLU, W, ReLU, ..., W]`` and return its weight layers."""
    blocks = []
    expect_weight = True
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            raise ConversionError("fold batch norm before conversion")
        if expect_weight:
            if not isinstance(layer, (Dense, Conv2d)):
                raise ConversionError(f"unsupported layer kind {layer.kind!r} at position {len(blocks)}")
            blocks.append(layer)
            expect_weight = False
        else:
            if not isinstance(layer, ReLU):
                raise ConversionError(f"unsupported layer kind {layer.kind!r}; expected relu between weight layers")
            expect_weight = True
    if expect_weight:
        raise ConversionError("network must end with a weight layer")
    return blocks


@dataclass
class ConversionReport:
    n_steps: int
    percentile: float
    thresholds: list = field(default_factory=list)
    upper_bounds: list = field(default_factory=list)
    input_scales: list = field(default_factory=list)
    injected_currents: list = field(default_factory=list)
    roles: list = field(default_factory=list)

    def to_text(self) -> str:
        """Key-value block, one ``key = value`` per line."""
        lines = [f"n_steps = {self.n_steps}", f"percentile = {self.percentile!r}", f"n_layers = {len(self.roles)}"]
        for i, role in enumerate(self.roles):
            lines.append(f"layer.{i}.role = {role}")
            lines.append(f"layer.{i}.threshold = {self.thresholds[i]!r}")
            lines.append(f"layer.{i}.upper_bound = {self.upper_bounds[i]!r}")
            lines.append(f"layer.{i}.input_scale = {self.input_scales[i]!r}")
            iota = ",".join(repr(float(x)) for x in np.asarray(self.injected_currents[i]).reshape(-1))
            lines.append(f"layer.{i}.iota = {iota}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str):
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        n = int(kv["n_layers"])

        def num(s):
            return None if s == "None" else float(s)

        rep = cls(int(kv["n_steps"]), float(kv["percentile"]))
        for i in range(n):
            rep.roles.append(kv[f"layer.{i}.role"])
            rep.thresholds.append(num(kv[f"layer.{i}.threshold"]))
            rep.upper_bounds.append(num(kv[f"layer.{i}.upper_bound"]))
            rep.input_scales.append(float(kv[f"layer.{i}.input_scale"]))
            iota = kv[f"layer.{i}.iota"]
            rep.injected_currents.append(np.array([float(x) for x in iota.split(",")]) if iota else np.zeros(0))
        return rep


def report_for(snn: SpikingNet, percentile, upper_bounds) -> ConversionReport:
    rep = ConversionReport(snn.n_steps, percentile)
    for sl, ub in zip(snn.layers, upper_bounds):
        rep.roles.append(sl.role)
        rep.thresholds.append(sl.threshold)
        rep.upper_bounds.append(ub)
        rep.input_scales.append(sl.input_scale)
        rep.injected_currents.append(np.array(sl.injected_current, dtype=np.float64))
    return rep


def analog_activations(net: AnalogNet, x):
    """Post-ReLU activations of every hidden weight layer for input batch ``x``."""
    acts = []
    h = x
    for layer in net.layers:
        h = layer.forward(h)
        if isinstance(layer, ReLU):
            acts.append(h)
    return acts


def primitive_convert(net: AnalogNet, n_steps, percentile, calibration_x, share_layers=False):
    """Convert every layer of a folded ReLU network at once.

    Thresholds come from the analog network's own activations on
    ``calibration_x``. Returns ``(SpikingNet, ConversionReport)``. The weight
    layers are deep-copied unless ``share_layers`` is true.
    """
    blocks = weight_blocks(net)
    acts = analog_activations(net, calibration_x)
    layers, bounds = [], []
    prev_threshold = 1.0
    L = len(blocks)
    for i, layer in enumerate(blocks):
        layer = layer if share_layers else copy.deepcopy(layer)
        layer._cache = None
        if L == 1:
            ub = percentile_upper_bound(np.maximum(layer.forward(calibration_x), 0), percentile)
            layer._cache = None
            layers.append(SpikingLayer(layer, "encode", n_steps, threshold_layer_norm(ub, n_steps)))
            bounds.append(ub)
            break
        if i == L - 1:
            layers.append(SpikingLayer(layer, "readout", n_steps, None, input_scale=prev_threshold))
            bounds.append(None)
            break
        ub = percentile_upper_bound(acts[i], percentile)
        thr = threshold_layer_norm(ub, n_steps)
        role = "encode" if i == 0 else "spike"
        layers.append(SpikingLayer(layer, role, n_steps, thr, input_scale=prev_threshold if i else 1.0))
        bounds.append(ub)
        prev_threshold = thr
    snn = SpikingNet(layers, net.input_shape, output_activation=net.output_activation)
    return snn, report_for(snn, percentile, bounds)
