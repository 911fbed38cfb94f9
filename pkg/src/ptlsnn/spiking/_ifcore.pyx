# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled integrate-and-fire kernels.

Both kernels update ``v`` and ``prev`` in place and write binary spikes into
``spikes``. Arithmetic is done in the array's own precision and in the same
order as the numpy fallback, so the two backends agree bit for bit.
"""

from cython cimport floating


def integrate(const floating[:, ::1] currents, floating threshold,
              floating[::1] v, unsigned char[::1] prev,
              unsigned char[:, ::1] spikes):
    """V[t] = V[t-1] + z[t] - threshold * s[t-1];  s[t] = V[t] >= threshold."""
    cdef Py_ssize_t T = currents.shape[0]
    cdef Py_ssize_t N = currents.shape[1]
    cdef Py_ssize_t t, n
    cdef floating vn
    with nogil:
        for t in range(T):
            # branch-free so the inner loop vectorizes; threshold * {0, 1} is exact
            for n in range(N):
                vn = (v[n] + currents[t, n]) - threshold * prev[n]
                v[n] = vn
                prev[n] = vn >= threshold
                spikes[t, n] = prev[n]


def encode(const floating[::1] a, floating threshold,
           floating[::1] v, unsigned char[::1] prev,
           unsigned char[:, ::1] spikes):
    """Inject ``a`` at the first step, then run the window with no further input."""
    cdef Py_ssize_t T = spikes.shape[0]
    cdef Py_ssize_t N = a.shape[0]
    cdef Py_ssize_t t, n
    cdef floating vn
    with nogil:
        for n in range(N):
            v[n] = v[n] + a[n]
        for t in range(T):
            for n in range(N):
                vn = v[n] - threshold * prev[n]
                v[n] = vn
                prev[n] = vn >= threshold
                spikes[t, n] = prev[n]
