"""Benchmark the KDE kernel sums: compiled extension vs numpy fallback.

The workload is hits x reference-size Gaussian kernel evaluations, the
inner loop of DLL scoring.  Inputs are seeded, so repeated runs time the same
work.  Example::

    python benchmarks/bench_kde.py --queries 2000 --refs 20000 --threads 1 2 --repeats 3
"""

from __future__ import annotations

import argparse
import json
import platform
import statistics
import time

import numpy as np

from dircformer.evaluation import kernels


def _inputs(n_queries: int, n_refs: int, seed: int):
    rng = np.random.default_rng(seed)
    # bandwidth-scaled coordinates: a few units of spread in each axis
    refs = rng.normal(scale=4.0, size=(n_refs, 3))
    queries = rng.normal(scale=4.0, size=(n_queries, 3))
    return queries, refs


def time_backend(backend: str, queries, refs, threads: int, repeats: int) -> tuple[float, np.ndarray]:
    out = kernels.kernel_sums(queries, refs, threads=threads, backend=backend)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = kernels.kernel_sums(queries, refs, threads=threads, backend=backend)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def run(n_queries: int, n_refs: int, threads: list[int], repeats: int, seed: int = 0) -> list[dict]:
    queries, refs = _inputs(n_queries, n_refs, seed)
    evals = n_queries * n_refs
    rows = []
    for th in threads:
        results = {}
        for backend in kernels.AVAILABLE:
            seconds, out = time_backend(backend, queries, refs, th, repeats)
            results[backend] = out
            rows.append({"backend": backend, "threads": th, "queries": n_queries, "refs": n_refs,
                         "seconds": seconds, "evals_per_s": evals / seconds})
        if len(results) == 2:
            a, b = results["cython"], results["numpy"]
            rows[-1]["max_rel_diff_vs_cython"] = float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300)))
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--refs", type=int, default=20000)
    ap.add_argument("--threads", type=int, nargs="+", default=[1])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)

    print(f"platform: {platform.platform()}  default backend: {kernels.BACKEND}  available: {kernels.AVAILABLE}")
    rows = run(args.queries, args.refs, args.threads, args.repeats, args.seed)
    print(f"{'backend':<8} {'threads':>7} {'seconds':>9} {'Meval/s':>9}")
    for r in rows:
        print(f"{r['backend']:<8} {r['threads']:>7} {r['seconds']:>9.4f} {r['evals_per_s'] / 1e6:>9.1f}")
    for th in args.threads:
        by = {r["backend"]: r for r in rows if r["threads"] == th}
        if len(by) == 2:
            print(f"threads={th}: compiled speed-up x{by['numpy']['seconds'] / by['cython']['seconds']:.2f}, "
                  f"max relative difference {by['numpy']['max_rel_diff_vs_cython']:.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
