import os
import subprocess
import sys

import numpy as np
import pytest

from dircformer.evaluation import kernels


def _brute(q, r):
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    return np.exp(-0.5 * d2).sum(1)


@pytest.mark.parametrize("backend", kernels.AVAILABLE)
@pytest.mark.parametrize("threads", [1, 3])
def test_backend_matches_brute_force(backend, threads):
    rng = np.random.default_rng(0)
    q, r = rng.normal(0, 3, (101, 3)), rng.normal(0, 3, (257, 3))
    np.testing.assert_allclose(kernels.kernel_sums(q, r, threads, backend), _brute(q, r), rtol=1e-12)


def test_backends_agree():
    if len(kernels.AVAILABLE) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(1)
    q, r = rng.normal(0, 4, (500, 3)), rng.normal(0, 4, (3000, 3))
    a = kernels.kernel_sums(q, r, backend="cython")
    b = kernels.kernel_sums(q, r, backend="numpy")
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_compiled_is_default_when_built():
    if "cython" in kernels.AVAILABLE and not os.environ.get("DIRCFORMER_PURE_PYTHON"):
        assert kernels.BACKEND == "cython"


def test_empty_and_unknown_backend():
    assert kernels.kernel_sums(np.zeros((0, 3)), np.ones((4, 3))).shape == (0,)
    with pytest.raises(ValueError):
        kernels.kernel_sums(np.zeros((1, 3)), np.ones((1, 3)), backend="fortran")


def test_pure_python_switch():
    code = "from dircformer.evaluation import kernels; print(kernels.BACKEND, kernels.AVAILABLE)"
    env = dict(os.environ, DIRCFORMER_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy ('numpy',)"


def test_benchmark_runs():
    sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "benchmarks"))
    try:
        import bench_kde
    finally:
        sys.path.pop(0)
    rows = bench_kde.run(50, 200, [1], repeats=1)
    assert {r["backend"] for r in rows} == set(kernels.AVAILABLE)
