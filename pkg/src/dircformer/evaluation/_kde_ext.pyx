# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Gaussian product-kernel sums."""

import numpy as np
from cython.parallel import prange
from libc.math cimport exp


def gaussian_kernel_sums(const double[:, ::1] queries, refs_in, int n_threads=1):
    """out[i] = sum_j exp(-|queries[i] - refs[j]|^2 / 2) for bandwidth-scaled 3-D points."""
    cdef Py_ssize_t m = queries.shape[0]
    cdef Py_ssize_t i, j
    cdef double qx, qy, qt, dx, dy, dt, s
    # column-major copy so the inner loop streams three contiguous arrays
    refs_t = np.ascontiguousarray(np.asarray(refs_in, dtype=np.float64).T)
    if queries.shape[1] != 3 or refs_t.shape[0] != 3:
        raise ValueError("kernel sums expect (n, 3) arrays")
    cdef const double[::1] rx = refs_t[0]
    cdef const double[::1] ry = refs_t[1]
    cdef const double[::1] rt = refs_t[2]
    cdef Py_ssize_t n = rx.shape[0]
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] o = out
    if n_threads < 1:
        n_threads = 1
    with nogil:
        for i in prange(m, num_threads=n_threads, schedule="static"):
            qx = queries[i, 0]
            qy = queries[i, 1]
            qt = queries[i, 2]
            s = 0.0
            for j in range(n):
                dx = qx - rx[j]
                dy = qy - ry[j]
                dt = qt - rt[j]
                s = s + exp(-0.5 * (dx * dx + dy * dy + dt * dt))
            o[i] = s
    return out
