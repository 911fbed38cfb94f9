"""Discrete-time integrate-and-fire neurons with reset by subtraction.

Per step ``t`` (1-based)::

    V[t] = V[t-1] + z[t] + iota - threshold * s[t-1]
    s[t] = 1 if V[t] >= threshold else 0

``z[t]`` is the weighted input spike current and ``iota`` the constant
per-step injected current (bias / n_steps). The reset of a spike fired at
``t-1`` is applied at step ``t``. At most one spike per neuron per step, and
the membrane potential is never clamped from below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass(frozen=True)
class IFParams:
    threshold: float
    n_steps: int
    injected_current: float | np.ndarray = 0.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if int(self.n_steps) < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass
class MembraneState:
    v: np.ndarray
    prev_spike: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype), np.zeros(shape, np.uint8))


@dataclass
class SpikeTrain:
    """Binary spikes with time on axis 0: ``spikes[t-1]`` holds ``s[t]``."""

    spikes: np.ndarray
    _counts: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_steps(self):
        return self.spikes.shape[0]

    @property
    def counts(self):
        if self._counts is None:
            self._counts = self.spikes.sum(axis=0, dtype=np.int32)
        return self._counts

    def spike_times(self, index=()):
        """1-based time steps at which the neuron at ``index`` fired."""
        return (np.flatnonzero(self.spikes[(slice(None),) + tuple(np.atleast_1d(index))]) + 1).tolist()


def if_step(state: MembraneState, z, params: IFParams):
    """Advance every neuron by one step; returns ``(spikes, new_state)``."""
    v = state.v + np.asarray(z) + params.injected_current
    v = v - params.threshold * state.prev_spike
    s = (v >= params.threshold).astype(np.uint8)
    return s, MembraneState(v, s)


def simulate_currents(currents, params: IFParams, backend=None) -> tuple[SpikeTrain, np.ndarray]:
    """Run a full window given per-step currents of shape ``(n_steps, ...)``.

    ``params.injected_current`` is added to every step.
    """
    currents = np.asarray(currents)
    if currents.shape[0] != params.n_steps:
        raise ValueError(f"current window has {currents.shape[0]} steps, expected {params.n_steps}")
    iota = params.injected_current
    if np.any(np.asarray(iota) != 0):
        currents = currents + iota
    spikes, v, _ = kernels.integrate(currents, params.threshold, backend=backend)
    return SpikeTrain(spikes), v


def run_layer_window(inputs, weights, params: IFParams, backend=None) -> SpikeTrain:
    """Simulate a dense IF layer over the window.

    ``inputs`` is a :class:`SpikeTrain` (or raw array) of shape
    ``(n_steps, ..., n_in)``; ``weights`` has shape ``(n_out, n_in)``.
    """
    s = inputs.spikes if isinstance(inputs, SpikeTrain) else np.asarray(inputs)
    weights = np.asarray(weights)
    if s.shape[0] != params.n_steps:
        raise ValueError(f"input window has {s.shape[0]} steps, layer expects {params.n_steps}")
    if s.shape[-1] != weights.shape[1]:
        raise ValueError(f"weights expect fan-in {weights.shape[1]}, inputs have {s.shape[-1]}")
    dtype = np.result_type(weights.dtype, np.float32)
    currents = s.astype(dtype) @ weights.T
    return simulate_currents(currents, params, backend=backend)[0]


def encode_activations(a, params: IFParams, backend=None) -> SpikeTrain:
    """Encode non-negative activations by injecting them at the first step.

    The neuron then discharges one spike per step while ``V >= threshold``, so
    the count is ``min(floor(a / threshold), n_steps)``.
    """
    a = np.asarray(a)
    if np.any(a < 0):
        raise ValueError("encode_activations expects non-negative (post-ReLU) activations")
    spikes, _ = kernels.encode(a, params.threshold, params.n_steps, backend=backend)
    return SpikeTrain(spikes)


def free_aggregate_potential(counts, weights, total_bias):
    """``sum_j w_ij c_j + B_i`` with firing disabled; ``B`` is the whole-window injected current."""
    counts = np.asarray(counts)
    weights = np.atleast_2d(np.asarray(weights))
    return counts @ weights.T + np.asarray(total_bias)


def record_synaptic_events(train: SpikeTrain | np.ndarray, fan_out) -> int:
    """Postsynaptic accumulate operations caused by ``train``: spikes times fan-out.

    ``fan_out`` is a scalar or an array broadcastable to one time step of the
    train (per-neuron fan-out for convolutions with borders).
    """
    counts = train.counts if isinstance(train, SpikeTrain) else np.asarray(train)
    return int(np.sum(counts * np.asarray(fan_out, dtype=np.int64)))


def dump_raster(train: SpikeTrain, path, name="layer"):
    """Write a spike raster as text: a header line then one row of 0/1 per neuron.

    Format::

        # raster <name> neurons=<N> steps=<T>
        0010110...
    """
    s = train.spikes.reshape(train.n_steps, -1).T
    with open(path, "a") as fh:
        fh.write(f"# raster {name} neurons={s.shape[0]} steps={s.shape[1]}\n")
        for row in s:
            fh.write("".join("1" if x else "0" for x in row) + "\n")


def load_raster(path):
    """Read rasters written by :func:`dump_raster` into ``{name: spikes (T, N)}``."""
    out, name, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# raster"):
                if name is not None:
                    out[name] = np.array(rows, np.uint8).T
                name, rows = line.split()[2], []
            elif line:
                rows.append([int(ch) for ch in line])
    if name is not None:
        out[name] = np.array(rows, np.uint8).T
    return out
