"""Benchmark batched track generation on the toy model.

The workload is the one the throughput regression test uses: an untrained
d=16 single-block model (nearly uniform next-token distributions, so the
nucleus holds almost the whole vocabulary, which is the slow case), a
30-hit budget and 64 tracks decoded as one batch.  Example::

    python benchmarks/bench_generation.py --tracks 64 --repeats 5

Reference measurements, one core, torch 1 thread, median of 5:

=====================  ==========  =================================
nucleus search         idle        one competing training job
=====================  ==========  =================================
log-bucket (current)   46 tracks/s 14 tracks/s
full sort per row      16 tracks/s  8 tracks/s
=====================  ==========  =================================

The regression baseline (``BASELINE_TRACKS_PER_S``) is 20 tracks/s.  It sits
between the two idle rates, so it catches a return to full sorting, and it
assumes the core is otherwise idle.
"""

from __future__ import annotations

import argparse
import json
import platform
import statistics
import time

import torch

from dircformer.generation import GenerationPolicy, generate_many
from dircformer.probes import tiny_model

BASELINE_TRACKS_PER_S = 20.0


def toy_model(seed: int = 11):
    return tiny_model(d_model=16, dtype=torch.float32, seed=seed)


def run(n_tracks: int = 64, max_hits: int = 30, repeats: int = 3, model=None, threads: int = 1) -> dict:
    """Median tracks/s over ``repeats`` timed batches (after one warm-up)."""
    torch.set_num_threads(threads)
    model = model if model is not None else toy_model()
    policy = GenerationPolicy(max_hits=max_hits)
    kins = [(3.0, 60.0)] * n_tracks
    generate_many(kins[:4], model, policy)  # warm-up
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        generate_many(kins, model, policy, batch_size=n_tracks)
        rates.append(n_tracks / (time.perf_counter() - t0))
    return {"tracks": n_tracks, "max_hits": max_hits, "threads": threads, "repeats": repeats,
            "tracks_per_s": statistics.median(rates), "all_rates": rates, "baseline": BASELINE_TRACKS_PER_S}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tracks", type=int, default=64)
    ap.add_argument("--max-hits", type=int, default=30)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", help="also write the result to this file")
    args = ap.parse_args(argv)

    print(f"platform: {platform.platform()}  torch {torch.__version__}")
    row = run(args.tracks, args.max_hits, args.repeats, threads=args.threads)
    print(f"{row['tracks_per_s']:.1f} tracks/s (median of {args.repeats}; baseline {BASELINE_TRACKS_PER_S:g})")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(row, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
