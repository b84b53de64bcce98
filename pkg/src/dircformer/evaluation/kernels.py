"""Gaussian kernel sums behind the KDE, compiled or numpy.

The compiled kernel is used when the extension was built and
``DIRCFORMER_PURE_PYTHON`` is unset; otherwise the numpy kernel runs.
Both evaluate the same sums in float64 and split the queries into chunks
that can run on several threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    if os.environ.get("DIRCFORMER_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from ._kde_ext import gaussian_kernel_sums as _compiled_sums
    BACKEND = "cython"
except ImportError:
    _compiled_sums = None
    BACKEND = "numpy"

AVAILABLE = ("cython", "numpy") if _compiled_sums is not None else ("numpy",)
# caps the (chunk x refs) temporary of the numpy kernel at ~32 MB
_NUMPY_BLOCK = 1 << 22


def _numpy_sums(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    out = np.empty(len(queries))
    rows = max(1, _NUMPY_BLOCK // max(len(refs), 1))
    rsq = np.einsum("ij,ij->i", refs, refs)
    for s in range(0, len(queries), rows):
        q = queries[s: s + rows]
        qsq = np.einsum("ij,ij->i", q, q)
        d2 = qsq[:, None] + rsq[None, :] - 2.0 * (q @ refs.T)
        np.maximum(d2, 0.0, out=d2)
        d2 *= -0.5
        np.exp(d2, out=d2)
        out[s: s + rows] = d2.sum(axis=1)
    return out


def kernel_sums(queries: np.ndarray, refs: np.ndarray, threads: int = 1, backend: str | None = None) -> np.ndarray:
    """sum_j exp(-|q_i - r_j|^2 / 2) for every query row (inputs already bandwidth-scaled)."""
    backend = backend or BACKEND
    if backend not in AVAILABLE:
        raise ValueError(f"kernel backend {backend!r} unavailable (have {AVAILABLE})")
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    refs = np.ascontiguousarray(refs, dtype=np.float64)
    if len(queries) == 0:
        return np.zeros(0)
    if backend == "cython":
        return _compiled_sums(queries, refs, max(int(threads), 1))
    if threads <= 1 or len(queries) < 2 * threads:
        return _numpy_sums(queries, refs)
    chunks = np.array_split(np.arange(len(queries)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda idx: _numpy_sums(queries[idx], refs), chunks))
    return np.concatenate(parts)
