"""Backend selection for the integrate-and-fire kernels.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used. Set ``PTLSNN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("PTLSNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ifcore as _compiled
    except ImportError:
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled


def available_backends():
    return sorted(_BACKENDS)


def _get(backend):
    if backend is None:
        return _impl
    try:
        return _BACKENDS[backend]
    except KeyError:
        raise ValueError(f"backend {backend!r} not available (have {available_backends()})") from None


def _float_dtype(*arrays):
    dt = np.result_type(*[a.dtype for a in arrays if a is not None])
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


def integrate(currents, threshold, v0=None, prev0=None, backend=None):
    """Run IF dynamics over a window of per-step synaptic currents.

    ``currents`` has shape ``(T, ...)``. Returns ``(spikes, v, prev)`` where
    ``spikes`` is a uint8 array shaped like ``currents`` and ``v``/``prev``
    are the membrane potential and last-step spike flags after step ``T``.
    """
    currents = np.asarray(currents)
    dtype = _float_dtype(currents)
    T = currents.shape[0]
    shape = currents.shape[1:]
    z = np.ascontiguousarray(currents.reshape(T, -1), dtype=dtype)
    n = z.shape[1]
    v = np.zeros(n, dtype) if v0 is None else np.array(v0, dtype=dtype).reshape(-1).copy()
    prev = np.zeros(n, np.uint8) if prev0 is None else np.array(prev0, dtype=np.uint8).reshape(-1).copy()
    spikes = np.empty((T, n), np.uint8)
    _get(backend).integrate(z, dtype.type(threshold), v, prev, spikes)
    return spikes.reshape((T,) + shape), v.reshape(shape), prev.reshape(shape)


def encode(a, threshold, n_steps, backend=None):
    """Spike trains for activations injected at the first step (shape ``(T,) + a.shape``)."""
    a = np.asarray(a)
    dtype = _float_dtype(a)
    flat = np.ascontiguousarray(a.reshape(-1), dtype=dtype)
    v = np.zeros(flat.shape[0], dtype)
    prev = np.zeros(flat.shape[0], np.uint8)
    spikes = np.empty((int(n_steps), flat.shape[0]), np.uint8)
    _get(backend).encode(flat, dtype.type(threshold), v, prev, spikes)
    return spikes.reshape((int(n_steps),) + a.shape), v.reshape(a.shape)
