"""Invariant suite behind ``dircformer selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import probes


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.value <= self.tolerance


def run_checks(quick: bool = False) -> list[CheckResult]:
    """Run every check; ``quick`` shrinks sample counts, not tolerances."""
    results = []

    def add(name, fn, tol):
        t0 = time.perf_counter()
        value = fn()
        results.append(CheckResult(name, float(value), tol, time.perf_counter() - t0))

    tok = probes.tokenizer_roundtrips(n_samples=2_000 if quick else 10_000)
    results.append(CheckResult("tokenizer.pixel_roundtrip (mismatches)", tok["pixel_mismatches"], 0, 0.0))
    results.append(CheckResult("tokenizer.time_roundtrip (err / half bin)", tok["time_error_over_half_bin"], 1.0, 0.0))
    results.append(CheckResult("tokenizer.monotone (violations)", tok["monotone_violations"], 0, 0.0))

    model = probes.tiny_model(d_model=32, n_heads=4, n_blocks=2)
    causal = probes.causal_probe(model)
    results.append(CheckResult("model.causal_cross_attention", causal["spatial"], 1e-6, 0.0))
    results.append(CheckResult("model.causal_self_attention", causal["time"], 1e-6, 0.0))
    add("model.qk_scale_invariance", lambda: probes.qk_scale_probe(model), 1e-6)

    for name, err in probes.op_gradient_checks().items():
        results.append(CheckResult(f"grad.{name}", err, 1e-4, 0.0))
    add("grad.end_to_end_d16", lambda: probes.model_gradient_check(probes.tiny_model(), entries_per_tensor=3
                                                                      if quick else 6), 1e-3)

    samp = probes.sampler_checks(n_dists=200 if quick else 1000, n_draws=10_000 if quick else 100_000)
    results.append(CheckResult("sampler.nucleus_vs_oracle (mismatches)", samp["nucleus_mismatches"], 0, 0.0))
    results.append(CheckResult("sampler.draws_outside_nucleus", samp["draws_outside_nucleus"], 0, 0.0))
    results.append(CheckResult("sampler.temperature_argmax (changes)", samp["argmax_changes"], 0, 0.0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'value':>12}  {'tolerance':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.value:>12.3g}  {r.tolerance:>10.3g}  {'PASS' if r.passed else 'FAIL'}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
