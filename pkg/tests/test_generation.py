import math
import os
import sys

import numpy as np
import pytest
import torch
from scipy import stats

from dircformer import probes, tensor_core as tc
from dircformer.errors import ConfigError, ModeError
from dircformer.generation import (GenerationPolicy, GenerationStats, apply_temperature, generate_batch,
                                   generate_many, generate_track, nucleus_filter, sample_inverse_cdf,
                                   top_k_filter)
from dircformer.model import CLASSIFIER


@pytest.fixture(scope="module")
def model():
    return probes.tiny_model(d_model=16, dtype=torch.float32, seed=11)


def _bias_heads(model, spatial: dict, time: dict):
    with torch.no_grad():
        for k, v in spatial.items():
            model.spatial_head.bias[k] = v
        for k, v in time.items():
            model.time_head.bias[k] = v


def test_nucleus_matches_subset_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        probs = rng.dirichlet(np.full(7, 0.4))
        p = float(rng.uniform(0.05, 0.999))
        np.testing.assert_array_equal(nucleus_filter(probs, p) > 0, probes.brute_force_nucleus(probs, p))


def test_nucleus_hand_example():
    probs = np.array([0.1, 0.5, 0.05, 0.3, 0.05])
    out = nucleus_filter(probs, 0.8)
    np.testing.assert_allclose(out, [0, 0.625, 0, 0.375, 0])
    np.testing.assert_allclose(nucleus_filter(probs, 1.0), probs)
    # ties are broken by ascending token id
    np.testing.assert_allclose(nucleus_filter(np.array([0.25] * 4), 0.5), [0.5, 0.5, 0, 0])
    with pytest.raises(ConfigError):
        nucleus_filter(probs, 0.0)


def test_inverse_cdf_draws_match_distribution():
    rng = np.random.default_rng(1)
    probs = torch.as_tensor(rng.dirichlet(np.ones(10)))
    kept = nucleus_filter(probs, 0.9)
    draws = sample_inverse_cdf(kept.expand(200_000, -1), rng.random(200_000))
    counts = np.bincount(draws, minlength=10)
    support = kept.numpy() > 0
    assert counts[~support].sum() == 0
    expected = kept.numpy()[support] * draws.size
    assert stats.chisquare(counts[support], expected).pvalue > 1e-3


def test_temperature_and_top_k():
    logits = torch.tensor([[1.0, 3.0, 2.0]])
    hot = tc.softmax_lastdim(apply_temperature(logits, 10.0))
    cold = tc.softmax_lastdim(apply_temperature(logits, 0.1))
    assert hot.argmax() == cold.argmax() == 1
    assert hot.max() < cold.max()
    with pytest.raises(ConfigError):
        apply_temperature(logits, 0.0)
    np.testing.assert_allclose(top_k_filter(torch.tensor([0.1, 0.6, 0.3]), 2).numpy(), [0, 2 / 3, 1 / 3])


def test_sampler_checks_probe():
    res = probes.sampler_checks(n_dists=100, n_draws=10_000)
    assert res == {"nucleus_mismatches": 0, "draws_outside_nucleus": 0, "argmax_changes": 0}


def test_policy_validation():
    for bad in ({"nucleus_p": 0}, {"nucleus_p": 1.5}, {"temperature": -1}, {"max_hits": 251},
                {"eos_policy": "any"}, {"sampler": "top_k"}):
        with pytest.raises(ConfigError):
            GenerationPolicy(**bad)


def test_independent_of_batch_composition(model):
    kins = [(2.0 + 0.5 * i, 40.0 + 9 * i) for i in range(7)]
    policy = GenerationPolicy(max_hits=12, seed=3)
    ref = generate_many(kins, model, policy, batch_size=7)
    for bs in (1, 3):
        other = generate_many(kins, model, policy, batch_size=bs)
        assert all(a.same_hits(b) and a.truncated == b.truncated for a, b in zip(ref, other))
    again = generate_many(kins, model, policy, batch_size=7)
    assert all(a.same_hits(b) for a, b in zip(ref, again))
    different = generate_many(kins, model, policy.with_(seed=4), batch_size=7)
    assert not all(a.same_hits(b) for a, b in zip(ref, different))


def test_generate_track_matches_batch(model):
    policy = GenerationPolicy(max_hits=10, seed=8)
    single = generate_track((3.0, 60.0), model, policy)
    batched = generate_batch([(3.0, 60.0), (5.0, 90.0)], model, policy, seeds=[8, 9])
    assert single.same_hits(batched[0])


def test_special_tokens_never_emitted():
    model = probes.tiny_model(d_model=16, dtype=torch.float32, seed=2)
    # make SOS/PAD/CLS overwhelmingly likely; they must still never be drawn
    _bias_heads(model, {6144: 50.0, 6146: 50.0, 6147: 50.0}, {5920: 50.0, 5922: 50.0, 5923: 50.0})
    tracks = generate_many([(3.0, 60.0)] * 5, model, GenerationPolicy(max_hits=20, nucleus_p=1.0))
    for t in tracks:
        assert np.all(t.pixels < 6144)
        assert np.all(t.times < 148.0)


def test_truncation_at_hit_budget():
    model = probes.tiny_model(d_model=16, dtype=torch.float32, seed=2)
    _bias_heads(model, {6145: -50.0}, {5921: -50.0})
    stats_ = GenerationStats()
    tracks = generate_many([(3.0, 60.0)] * 3, model, GenerationPolicy(max_hits=9), stats=stats_)
    assert all(t.truncated and t.n_hits == 9 for t in tracks)
    assert stats_.truncated == 3
    assert all(t.is_sorted() for t in tracks)


def test_eos_policies():
    model = probes.tiny_model(d_model=16, dtype=torch.float32, seed=2)
    # the time stream ends at once, the spatial stream never does
    _bias_heads(model, {6145: -50.0}, {5921: 50.0})
    both = generate_many([(3.0, 60.0)], model, GenerationPolicy(max_hits=6, eos_policy="both"))[0]
    either = generate_many([(3.0, 60.0)], model, GenerationPolicy(max_hits=6, eos_policy="either"))[0]
    # decoded hits end at the first EOS of either stream
    assert both.n_hits == 0 and either.n_hits == 0
    assert not both.truncated


def test_joint_eos_follows_time_stream():
    model = probes.tiny_model(d_model=16, dtype=torch.float32, seed=2)
    # spatial EOS overwhelmingly likely, time EOS impossible: joint stopping ignores the spatial head
    _bias_heads(model, {6145: 50.0}, {5921: -50.0})
    stats_ = GenerationStats()
    joint = generate_many([(3.0, 60.0)] * 3, model, GenerationPolicy(max_hits=7), stats=stats_)
    assert all(t.truncated and t.n_hits == 7 for t in joint)
    either = generate_many([(3.0, 60.0)], model, GenerationPolicy(max_hits=7, eos_policy="either"))[0]
    assert either.n_hits == 0
    # time EOS at once: the track ends together, with no stream left over
    _bias_heads(model, {6145: -50.0}, {5921: 50.0})
    stats_ = GenerationStats()
    tracks = generate_many([(3.0, 60.0)] * 3, model, GenerationPolicy(max_hits=7), stats=stats_)
    assert all(t.n_hits == 0 and not t.truncated for t in tracks)
    assert stats_.async_eos == 0


def _constant_eos_model(h):
    """Heads that ignore the input: every ordinary token equally likely, EOS with probability ``h``."""
    model = probes.tiny_model(d_model=16, dtype=torch.float32, seed=3)
    with torch.no_grad():
        for head, eos, n_ordinary in ((model.spatial_head, 6145, 6144), (model.time_head, 5921, 5920)):
            head.weight.zero_()
            head.bias.zero_()
            head.bias[eos] = math.log(h / (1 - h) * n_ordinary)
    return model


def test_track_length_follows_eos_hazard():
    h, n = 0.1, 400
    model = _constant_eos_model(h)
    policy = GenerationPolicy(temperature=1.0, nucleus_p=1.0, seed=4)
    joint = np.array([t.n_hits for t in generate_many([(3.0, 60.0)] * n, model, policy)])
    either = np.array([t.n_hits for t in generate_many([(3.0, 60.0)] * n, model, policy.with_(eos_policy="either"))])
    # geometric stopping: hazard h for the time head alone, 1 - (1 - h)^2 for two independent heads
    for lengths, hazard in ((joint, h), (either, 1 - (1 - h) ** 2)):
        mean, sd = (1 - hazard) / hazard, math.sqrt(1 - hazard) / hazard
        assert abs(lengths.mean() - mean) < 4 * sd / math.sqrt(n), (lengths.mean(), mean)


def test_generation_needs_generative_model():
    with pytest.raises(ModeError):
        generate_many([(3.0, 60.0)], probes.tiny_model(mode=CLASSIFIER))


def test_nucleus_spec_case():
    np.testing.assert_allclose(nucleus_filter(np.array([0.6, 0.3, 0.1]), 0.85), [2 / 3, 1 / 3, 0])


def test_temperature_identity_and_entropy():
    logits = torch.tensor([2.0, -1.0, 0.5, 0.0])
    assert torch.equal(apply_temperature(logits, 1.0), logits)

    def entropy(x):
        p = tc.softmax_lastdim(x)
        return float(-(p * p.log()).sum())

    assert entropy(apply_temperature(logits, 2.0)) > entropy(logits)


def test_zero_budget_gives_empty_tracks(model):
    tracks = generate_many([(3.0, 60.0)] * 2, model, GenerationPolicy(max_hits=0))
    assert all(t.n_hits == 0 for t in tracks)


def test_duplicated_seeds_duplicate_outputs(model):
    out = generate_batch([(4.0, 70.0)] * 3, model, GenerationPolicy(max_hits=10), seeds=[5, 5, 5])
    assert out[0].same_hits(out[1]) and out[1].same_hits(out[2])


def test_batch_equals_sequential_32(model):
    rng = np.random.default_rng(2)
    kins = [(float(p), float(t)) for p, t in zip(rng.uniform(1, 10, 32), rng.uniform(25, 160, 32))]
    seeds = list(range(100, 132))
    policy = GenerationPolicy(max_hits=6)
    batched = generate_batch(kins, model, policy, seeds=seeds)
    for k, s, b in zip(kins, seeds, batched):
        assert generate_track(k, model, policy.with_(seed=s)).same_hits(b)


def _load_benchmark(name):
    import importlib
    sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "benchmarks"))
    try:
        return importlib.import_module(name)
    finally:
        sys.path.pop(0)


def test_throughput_baseline(model):
    # same workload as benchmarks/bench_generation.py; the baseline is documented there
    bench = _load_benchmark("bench_generation")
    assert bench.run(model=model, repeats=3)["tracks_per_s"] >= bench.BASELINE_TRACKS_PER_S


def _sorted_nucleus(x, p):
    # reference: full stable sort
    sp, order = torch.sort(x, dim=-1, descending=True, stable=True)
    keep = (torch.cumsum(sp, -1) - sp) < p
    return torch.zeros_like(keep).scatter(-1, order, keep)


@pytest.mark.parametrize("vocab", [5, 300, 6148])
def test_nucleus_matches_full_sort_with_ties(vocab):
    rng = np.random.default_rng(vocab)
    # coarse quantisation forces many exact ties, including at the cut
    raw = np.round(rng.dirichlet(np.full(vocab, 0.3), size=40) * 50) + 1
    x = torch.as_tensor(raw / raw.sum(-1, keepdims=True))
    # probabilities are multiples of 1/total: keep p off that lattice so that
    # no prefix sum equals p up to rounding (where summation order decides)
    for p in (0.1, 0.5, 0.9, 0.995):
        p += 1e-7 * math.pi
        got = nucleus_filter(x, p) > 0
        assert torch.equal(got, _sorted_nucleus(x, p)), p
