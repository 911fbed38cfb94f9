"""k-bit weight quantization for quantization-aware training.

Full-precision master weights keep learning in the analog layer; the spiking
layer only ever sees a per-tensor symmetric k-bit copy. Gradients reach the
master through a straight-through estimator (the rounding is treated as the
identity), which in practice means the master is updated with the gradient
computed at the quantized weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WeightQuantSpec:
    """``bits=None`` disables quantization (full precision pass-through)."""

    bits: int | None

    def __post_init__(self):
        if self.bits is not None and int(self.bits) < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")

    @property
    def enabled(self):
        return self.bits is not None

    @property
    def max_level(self):
        return 2 ** (self.bits - 1) - 1 if self.bits and self.bits >= 2 else 1

    def scale_for(self, w):
        w = np.asarray(w)
        if self.bits == 1:
            return float(np.mean(np.abs(w)))
        return float(np.max(np.abs(w))) / self.max_level if w.size else 0.0

    @classmethod
    def parse(cls, value):
        """Accept ``"off"``, ``None`` or an integer bit width."""
        if value is None or str(value).lower() in ("off", "none", "float", "inf"):
            return cls(None)
        return cls(int(value))


def quantize_weights_kbit(w, spec: WeightQuantSpec):
    """Round ``w`` onto the symmetric grid ``{-m..m} * scale`` with ``scale = max|w| / m``.

    ``m = 2**(bits-1) - 1``. One bit maps to ``+-mean|w|`` by sign (zero goes
    to ``+scale``). An all-zero tensor is returned unchanged.
    """
    w = np.asarray(w)
    if not spec.enabled:
        return w
    scale = spec.scale_for(w)
    if scale == 0.0:
        return w.copy()
    dtype = w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64
    s = dtype.type(scale)
    if spec.bits == 1:
        return np.where(w >= 0, s, -s).astype(dtype)
    m = spec.max_level
    n = np.clip(np.rint(w / s), -m, m)
    return (n * s).astype(dtype)


def quantize_layer(layer, spec: WeightQuantSpec):
    """Quantized ``(W, b)`` copies for sharing with a spiking layer (weights and bias separately)."""
    return quantize_weights_kbit(layer.W, spec), quantize_weights_kbit(layer.b, spec)


class SharedWeights:
    """Keeps a spiking layer's shared copy in sync with its full-precision master.

    With quantization off the spiking layer shares the master arrays
    themselves, so the two are bit-identical by construction.
    """

    def __init__(self, spiking_layer, spec: WeightQuantSpec):
        self.sl = spiking_layer
        self.spec = spec
        self.refresh()

    def refresh(self):
        if not self.spec.enabled:
            self.sl.shared_W = None
            self.sl.shared_b = None
        else:
            self.sl.shared_W, self.sl.shared_b = quantize_layer(self.sl.layer, self.spec)
        return self.sl.W, self.sl.b


def qat_share_step(master: dict, grads: dict, spec: WeightQuantSpec, optimizer_step):
    """One QAT update: ``optimizer_step(master, grads)`` then re-quantize.

    ``master`` maps names to full-precision arrays updated in place by the
    optimizer; the returned dict holds the freshly quantized shared copies.
    """
    optimizer_step(master, grads)
    return {k: quantize_weights_kbit(v, spec) for k, v in master.items()}
