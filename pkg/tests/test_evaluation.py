import math
import warnings

import numpy as np
import pytest
from scipy import stats

from dircformer import probes
from dircformer.errors import EvaluationError, ModeError
from dircformer.evaluation import (build_marginals, chi2_distance, classifier_metrics, dll, dll_many,
                                   hits_xyt, kde_fit, occupancy_map, ratio, roc_auc, score_metrics,
                                   separation_power, separation_scan, spatial_fraction_within, yield_comparison)
from dircformer.records import TrackRecord
from dircformer.toy import simulate_fixed


@pytest.fixture(scope="module")
def refs_15():
    """Well-separated references: 1.5 GeV/c, theta = 60 deg."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kp = kde_fit(simulate_fixed("pion", 1.5, 60.0, 1000, seed=1), label="pion")
        kk = kde_fit(simulate_fixed("kaon", 1.5, 60.0, 1000, seed=2), label="kaon")
    return kp, kk


# --- marginals and ratios -------------------------------------------------------

def test_single_hit_marginals():
    h = build_marginals([TrackRecord("pion", 3.0, 60.0, [97], [10.2])])
    for axis in ("x", "y", "time"):
        assert h.axis(axis).counts.sum() == 1
    assert np.argmax(h.x.counts) == 1 and np.argmax(h.y.counts) == 1  # pixel (row 1, col 1)
    assert np.argmax(h.time.counts) == 20


def test_marginals_additive(pion_tracks):
    a, b = pion_tracks[:100], pion_tracks[100:]
    whole = build_marginals(pion_tracks, pixels_per_bin=4)
    parts = build_marginals(a, pixels_per_bin=4) + build_marginals(b, pixels_per_bin=4)
    for axis in ("x", "y", "time"):
        np.testing.assert_array_equal(whole.axis(axis).counts, parts.axis(axis).counts)
    assert whole.n_hits == sum(t.n_hits for t in pion_tracks) == whole.x.counts.sum()
    with pytest.raises(EvaluationError):
        build_marginals([])


def test_oracle_marginals_stable_across_seeds():
    a = build_marginals(simulate_fixed("kaon", 3.0, 60.0, 10_000, seed=10), pixels_per_bin=4)
    b = build_marginals(simulate_fixed("kaon", 3.0, 60.0, 10_000, seed=11), pixels_per_bin=4)
    for axis in ("x", "y", "time"):
        ca, cb = a.axis(axis).counts, b.axis(axis).counts
        keep = (ca + cb) >= 20
        table = np.vstack([ca[keep], cb[keep]])
        assert stats.chi2_contingency(table).pvalue > 1e-3, axis


def test_ratio_identical_and_doubled(pion_tracks):
    ref = build_marginals(pion_tracks, pixels_per_bin=4)
    same = ratio(ref, ref, "x")
    kept = ~same.excluded
    assert np.all(same.ratio[kept] == 1.0) and np.all(np.isnan(same.ratio[same.excluded]))
    double = build_marginals(pion_tracks + pion_tracks, pixels_per_bin=4)
    r2 = ratio(double, ref, "time", normalize="none")
    assert np.all(r2.ratio[~r2.excluded] == 2.0)
    # per-track normalisation cancels the doubled track count
    assert np.all(ratio(double, ref, "time").ratio[~r2.excluded] == 1.0)
    assert spatial_fraction_within(ref, ref) == 1.0
    assert same.fraction_within() == 1.0


def test_ratio_uncertainty(pion_tracks):
    ref = build_marginals(pion_tracks, pixels_per_bin=4)
    r = ratio(ref, ref, "y", normalize="none")
    k = ~r.excluded
    np.testing.assert_allclose(r.uncertainty[k], np.sqrt(2.0 / ref.y.counts[k]))


def test_ratio_edge_mismatch(pion_tracks):
    with pytest.raises(EvaluationError):
        ratio(build_marginals(pion_tracks, pixels_per_bin=4), build_marginals(pion_tracks, pixels_per_bin=2), "x")


# --- yield ----------------------------------------------------------------------

def test_yield_identical_sets(pion_tracks):
    res = yield_comparison(pion_tracks, pion_tracks)
    assert all(b.relative_difference == 0.0 for b in res.bins if not b.missing)
    assert res.max_abs_relative_difference() == 0.0
    assert all(b.theta_hi - b.theta_lo == 5.0 for b in res.bins)


def test_yield_missing_bins_reported(pion_tracks):
    low = [t for t in pion_tracks if t.theta < 60]
    res = yield_comparison(low, pion_tracks, theta_edges=np.arange(25, 165, 5))
    missing = res.missing
    assert missing and all(b.gen_n == 0 and math.isnan(b.relative_difference) for b in missing)


def test_yield_self_split_halves_agree():
    from dircformer.toy import simulate_dataset
    tracks = simulate_dataset("pion", 6000, seed=12)
    res = yield_comparison(tracks[::2], tracks[1::2], theta_bin_width=15)
    pulls = []
    for b in res.bins:
        if b.gen_n < 30 or b.ref_n < 30:
            continue
        err = math.sqrt(b.gen_std ** 2 / b.gen_n + b.ref_std ** 2 / b.ref_n)
        pulls.append((b.gen_mean - b.ref_mean) / err)
    assert len(pulls) >= 8
    assert max(abs(p) for p in pulls) < 4.0


# --- KDE ------------------------------------------------------------------------

def test_kde_integrates_to_one():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.normal(100, 8, 60), rng.normal(50, 5, 60), rng.normal(20, 1, 60)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kde = kde_fit(pts, bandwidths=(4.0, 3.0, 0.5))
    axes = [np.linspace(m - 8 * s, m + 8 * s, 70) for m, s in ((100, 9), (50, 6), (20, 1.2))]
    gx, gy, gt = np.meshgrid(*axes, indexing="ij")
    f = kde.density(np.column_stack([gx.ravel(), gy.ravel(), gt.ravel()])).reshape(gx.shape)
    volume = np.prod([a[1] - a[0] for a in axes])
    assert f.sum() * volume == pytest.approx(1.0, abs=0.02)


def test_kde_single_hit_peak_and_far_point():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kde = kde_fit(np.array([[30.0, 40.0, 12.0]]), bandwidths=(2.0, 2.0, 0.3))
    at = kde.density(np.array([[30.0, 40.0, 12.0]]))[0]
    near = kde.density(np.array([[31.0, 40.0, 12.0], [30.0, 39.0, 12.1], [30, 40, 11.9]]))
    far = kde.density(np.array([[300.0, 200.0, 90.0]]))[0]
    assert np.all(near < at) and far < at
    assert at == pytest.approx(1.0 / ((2 * math.pi) ** 1.5 * 2.0 * 2.0 * 0.3))


def test_kde_fit_guards():
    with pytest.raises(EvaluationError):
        kde_fit([TrackRecord("pion", 3.0, 60.0)])
    with pytest.warns(RuntimeWarning, match="hits"):
        kde_fit(np.zeros((10, 3)) + [1, 2, 3])
    with pytest.raises(EvaluationError):
        kde_fit(np.ones((2000, 3)), bandwidths=(1, 0, 1))


def test_scott_bandwidths(pion_tracks):
    pts = hits_xyt(pion_tracks)
    kde = kde_fit(pion_tracks)
    expect = pts.std(axis=0, ddof=1) * len(pts) ** (-1 / 7)
    np.testing.assert_allclose(kde.bandwidths, expect)


def test_dll_symmetry_antisymmetry_additivity(refs_15, pion_tracks):
    kp, kk = refs_15
    track = simulate_fixed("pion", 1.5, 60.0, 1, seed=99)[0]
    assert dll(track, kp, kp).value == 0.0
    d = dll(track, kp, kk).value
    assert dll(track, kk, kp).value == pytest.approx(-d, rel=1e-12)
    half = track.n_hits // 2
    a = TrackRecord("pion", 1.5, 60.0, track.pixels[:half], track.times[:half])
    b = TrackRecord("pion", 1.5, 60.0, track.pixels[half:], track.times[half:])
    assert dll(a, kp, kk).value + dll(b, kp, kk).value == pytest.approx(d, rel=1e-10)


def test_dll_empty_track(refs_15):
    res = dll(TrackRecord("kaon", 1.5, 60.0), *refs_15)
    assert res.empty and res.value == 0.0 and res.n_hits == 0


def test_dll_floor_reported(refs_15):
    far = TrackRecord("pion", 1.5, 60.0, [0], [147.0])
    with pytest.warns(RuntimeWarning, match="floor"):
        res = dll(far, *refs_15)
    assert res.n_floored == 1 and res.value == 0.0


def test_dll_yield_term(refs_15):
    kp, kk = refs_15
    track = simulate_fixed("pion", 1.5, 60.0, 1, seed=5)[0]
    base = dll(track, kp, kk).value
    with_yield = dll(track, kp, kk, yield_term=True).value
    n = track.n_hits
    expect = stats.poisson.logpmf(n, kp.mean_yield) - stats.poisson.logpmf(n, kk.mean_yield)
    assert with_yield - base == pytest.approx(expect, rel=1e-9)


def test_dll_sign_on_oracle_tracks(refs_15):
    kp, kk = refs_15
    pions = simulate_fixed("pion", 1.5, 60.0, 1000, seed=20)
    kaons = simulate_fixed("kaon", 1.5, 60.0, 1000, seed=21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dp = np.array([r.value for r in dll_many(pions, kp, kk) if not r.empty])
        dk = np.array([r.value for r in dll_many(kaons, kp, kk) if not r.empty])
    assert np.mean(dp > 0) >= 0.95
    assert np.mean(dk < 0) >= 0.95


def test_dll_many_matches_single(refs_15):
    tracks = simulate_fixed("kaon", 1.5, 60.0, 5, seed=3)
    many = dll_many(tracks, *refs_15)
    for t, m in zip(tracks, many):
        assert dll(t, *refs_15).value == pytest.approx(m.value, rel=1e-12)


# --- separation -----------------------------------------------------------------

def _standardised(rng, n):
    z = rng.standard_normal(n)
    return (z - z.mean()) / z.std()


def test_separation_analytic(rng):
    z1, z2 = _standardised(rng, 500), _standardised(rng, 700)
    entry = separation_power(z1 + 1.5, z2 - 1.5)
    assert entry.separation == pytest.approx(3.0, abs=1e-12)
    assert separation_power(z1, z1).separation == 0.0


def test_separation_affine_invariance(rng):
    a, b = rng.normal(2, 1, 300), rng.normal(-1, 2, 400)
    s = separation_power(a, b).separation
    assert separation_power(3 * a - 7, 3 * b - 7).separation == pytest.approx(s, rel=1e-12)
    assert separation_power(-0.5 * a + 1, -0.5 * b + 1).separation == pytest.approx(s, rel=1e-12)


def test_separation_fit_close_to_moments(rng):
    a, b = rng.normal(3, 1, 20_000), rng.normal(-3, 1.5, 20_000)
    fit = separation_power(a, b, method="fit")
    assert fit.separation == pytest.approx(separation_power(a, b).separation, rel=0.03)


def test_separation_guards():
    with pytest.raises(EvaluationError):
        separation_power(np.ones(50), np.arange(50.0))
    with pytest.raises(EvaluationError):
        separation_power(np.arange(5.0), np.arange(50.0))
    with pytest.raises(EvaluationError):
        separation_power(np.arange(50.0), np.arange(50.0), method="median")


def test_separation_drops_as_ring_gap_closes():
    seps = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for p in (1.5, 3.0, 6.0):
            ref_pi = simulate_fixed("pion", p, 60.0, 600, seed=31)
            ref_k = simulate_fixed("kaon", p, 60.0, 600, seed=32)
            test_pi = simulate_fixed("pion", p, 60.0, 300, seed=33)
            test_k = simulate_fixed("kaon", p, 60.0, 300, seed=34)
            res = separation_scan(test_pi, test_k, ref_pi, ref_k, theta_edges=[55, 65])
            seps.append(res.mean)
    assert seps[0] > seps[1] > seps[2] > 0


# --- occupancy ------------------------------------------------------------------

def test_occupancy_conservation_and_empty(pion_tracks):
    assert not occupancy_map([]).any() and occupancy_map([]).shape == (64, 96)
    occ = occupancy_map(pion_tracks)
    assert occ.sum() == sum(t.n_hits for t in pion_tracks)
    t = pion_tracks[0]
    single = occupancy_map([t])
    assert single[t.pixels[0] // 96, t.pixels[0] % 96] >= 1


def test_occupancy_fold_effect(toy_cfg):
    on = occupancy_map(simulate_fixed("pion", 3.0, 25.0, 2000, toy_cfg, seed=40))
    off = occupancy_map(simulate_fixed("pion", 3.0, 25.0, 2000, toy_cfg.with_(fold=False), seed=40))
    assert chi2_distance(on, off) > 0
    assert chi2_distance(on, on) == 0.0


# --- classifier metrics ---------------------------------------------------------

def test_perfect_and_random_scores(rng):
    labels = np.repeat([0, 1], 500)
    perfect = np.eye(2)[labels]
    m = score_metrics(perfect, labels)
    assert m.accuracy == 1.0 and m.roc_auc == 1.0
    p1 = rng.random(1000)
    rand = score_metrics(np.column_stack([1 - p1, p1]), labels)
    assert abs(rand.accuracy - 0.5) < 4 * math.sqrt(0.25 / 1000)
    assert abs(rand.roc_auc - 0.5) < 0.07


def test_roc_auc_ties_and_single_class():
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    assert roc_auc([0.1, 0.2, 0.9], [0, 1, 1]) == 1.0
    with pytest.raises(EvaluationError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(EvaluationError):
        score_metrics(np.full((4, 2), 0.5), np.zeros(4))


def test_score_metrics_per_theta(rng):
    labels = np.repeat([0, 1], 400)
    thetas = rng.uniform(30, 90, 800)
    p1 = np.clip(0.3 + 0.4 * labels + rng.normal(0, 0.1, 800), 0.01, 0.99)
    m = score_metrics(np.column_stack([1 - p1, p1]), labels, thetas, theta_edges=[30, 60, 90])
    assert len(m.separation) == 2 and m.mean_separation > 1


def test_classifier_metrics_guards(pion_tracks, kaon_tracks):
    with pytest.raises(ModeError):
        classifier_metrics(probes.tiny_model(), pion_tracks[:4] + kaon_tracks[:4])
    with pytest.raises(EvaluationError):
        classifier_metrics(probes.tiny_model(mode="classifier"), pion_tracks[:4])
    m = classifier_metrics(probes.tiny_model(mode="classifier"), pion_tracks[:20] + kaon_tracks[:20])
    assert m.n == 40 and 0 <= m.accuracy <= 1
