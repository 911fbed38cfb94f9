"""Pure-numpy integrate-and-fire kernels, same signatures as ``_ifcore``.

Vectorized over neurons, looped over time steps. The update order matches the
compiled kernels exactly so both backends produce identical spikes.
"""

import numpy as np


def integrate(currents, threshold, v, prev, spikes):
    thr = v.dtype.type(threshold)
    for t in range(currents.shape[0]):
        vt = v + currents[t]
        np.subtract(vt, thr, out=vt, where=prev.astype(bool))
        v[...] = vt
        fired = vt >= thr
        prev[...] = fired
        spikes[t] = fired


def encode(a, threshold, v, prev, spikes):
    thr = v.dtype.type(threshold)
    vt = v + a
    for t in range(spikes.shape[0]):
        np.subtract(vt, thr, out=vt, where=prev.astype(bool))
        fired = vt >= thr
        prev[...] = fired
        spikes[t] = fired
    v[...] = vt
