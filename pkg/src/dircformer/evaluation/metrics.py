"""Histogram, yield, occupancy and classifier metrics for closure tests.

Marginal histograms use fixed edges derived from the detector description:
x and y edges sit on pixel boundaries (``pixels_per_bin`` pixels per bin)
and time edges are uniform over the time window (``time_bin_ns`` wide).
Every histogram keeps raw counts; normalisation happens only when ratios
or distances are formed, so totals are conserved and histograms add.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from ..errors import EvaluationError
from ..records import TrackRecord
from ..tokenizer import PixelGrid, TimeBinning, pixel_to_xy
from .kde import SeparationEntry, separation_power

AXES = ("x", "y", "time")
SOURCES = ("oracle", "generated")


@dataclass
class Histogram1D:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if len(self.edges) != len(self.counts) + 1:
            raise EvaluationError("histogram needs len(edges) == len(counts) + 1")

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def __add__(self, other: "Histogram1D") -> "Histogram1D":
        if not np.array_equal(self.edges, other.edges):
            raise EvaluationError("cannot add histograms with different edges")
        return Histogram1D(self.edges, self.counts + other.counts)


@dataclass
class MarginalHistograms:
    x: Histogram1D
    y: Histogram1D
    time: Histogram1D
    n_tracks: int
    n_hits: int
    source: str = "oracle"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise EvaluationError(f"source must be one of {SOURCES}, got {self.source!r}")

    def axis(self, name: str) -> Histogram1D:
        if name not in AXES:
            raise EvaluationError(f"unknown axis {name!r}")
        return getattr(self, name)

    def normalized(self, name: str) -> np.ndarray:
        """Counts per track."""
        return self.axis(name).counts / max(self.n_tracks, 1)

    def __add__(self, other: "MarginalHistograms") -> "MarginalHistograms":
        return MarginalHistograms(self.x + other.x, self.y + other.y, self.time + other.time,
                                  self.n_tracks + other.n_tracks, self.n_hits + other.n_hits, self.source)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "lo", "hi", "count", "per_track"])
            for name in AXES:
                h = self.axis(name)
                for lo, hi, c, n in zip(h.edges[:-1], h.edges[1:], h.counts, self.normalized(name)):
                    w.writerow([name, lo, hi, int(c), n])


def marginal_edges(grid: PixelGrid = PixelGrid(), binning: TimeBinning = TimeBinning(),
                   pixels_per_bin: int = 1, time_bin_ns: float = 0.5) -> dict[str, np.ndarray]:
    """The documented histogram edges for each axis."""
    if pixels_per_bin < 1 or time_bin_ns <= 0:
        raise EvaluationError("bin sizes must be positive")

    def pixel_edges(n, pitch, origin):
        # a short last bin when the pixel count is not a multiple of pixels_per_bin
        k = np.unique(np.append(np.arange(0, n, pixels_per_bin), n))
        return origin + k * pitch

    x = pixel_edges(grid.n_cols, grid.pitch_x, grid.origin_x)
    y = pixel_edges(grid.n_rows, grid.pitch_y, grid.origin_y)
    n_t = int(math.ceil((binning.t_max - binning.t_min) / time_bin_ns - 1e-9))
    t = binning.t_min + np.arange(n_t + 1) * time_bin_ns
    t[-1] = max(t[-1], binning.t_max)
    return {"x": x, "y": y, "time": t}


def build_marginals(tracks: Sequence[TrackRecord], grid: PixelGrid = PixelGrid(),
                    binning: TimeBinning = TimeBinning(), source: str = "oracle",
                    pixels_per_bin: int = 1, time_bin_ns: float = 0.5) -> MarginalHistograms:
    """Pool the hits of ``tracks`` into x, y (pixel centres) and time histograms."""
    tracks = list(tracks)
    if not tracks:
        raise EvaluationError("build_marginals needs at least one track")
    edges = marginal_edges(grid, binning, pixels_per_bin, time_bin_ns)
    pixels = np.concatenate([t.pixels for t in tracks])
    times = np.concatenate([t.times for t in tracks])
    x, y = pixel_to_xy(pixels, grid)
    hx = Histogram1D(edges["x"], np.histogram(x, edges["x"])[0])
    hy = Histogram1D(edges["y"], np.histogram(y, edges["y"])[0])
    ht = Histogram1D(edges["time"], np.histogram(times, edges["time"])[0])
    return MarginalHistograms(hx, hy, ht, len(tracks), int(len(pixels)), source)


@dataclass
class RatioResult:
    edges: np.ndarray
    ratio: np.ndarray
    uncertainty: np.ndarray
    reference_mass: np.ndarray
    excluded: np.ndarray

    def fraction_within(self, tolerance: float = 0.1, min_mass: float = 0.01) -> float:
        """Fraction of bins with reference mass >= ``min_mass`` whose ratio lies within 1 +- tolerance."""
        sel = (self.reference_mass >= min_mass) & ~self.excluded
        if not sel.any():
            raise EvaluationError("no bins above the mass threshold")
        r = self.ratio[sel]
        return float(np.mean((r >= 1 - tolerance) & (r <= 1 + tolerance)))


def ratio(generated: MarginalHistograms, reference: MarginalHistograms, axis: str,
          normalize: str = "track") -> RatioResult:
    """Per-bin generated/reference ratio of one axis.

    ``normalize`` is ``"track"`` (counts per track, so yield differences show),
    ``"area"`` (unit-area shapes) or ``"none"`` (raw counts).  Bins with zero
    reference counts are excluded and flagged, with ratio NaN.  The
    uncertainty treats both counts as Poisson:
    ``ratio * sqrt(1/n_gen + 1/n_ref)``.
    """
    g, r = generated.axis(axis), reference.axis(axis)
    if not np.array_equal(g.edges, r.edges):
        raise EvaluationError(f"{axis} histograms have different edges")
    if normalize == "track":
        sg, sr = max(generated.n_tracks, 1), max(reference.n_tracks, 1)
    elif normalize == "area":
        sg, sr = max(g.total, 1.0), max(r.total, 1.0)
    elif normalize == "none":
        sg = sr = 1.0
    else:
        raise EvaluationError(f"unknown normalisation {normalize!r}")
    excluded = r.counts == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rat = np.where(excluded, np.nan, (g.counts / sg) / np.where(excluded, 1.0, r.counts / sr))
        err = rat * np.sqrt(np.where(g.counts > 0, 1.0 / g.counts, 0.0) + np.where(excluded, np.nan, 1.0 / r.counts))
    mass = r.counts / max(r.total, 1.0)
    return RatioResult(g.edges, rat, err, mass, excluded)


def spatial_fraction_within(generated: MarginalHistograms, reference: MarginalHistograms,
                            tolerance: float = 0.1, min_mass: float = 0.01, normalize: str = "track") -> float:
    """Pooled x and y bins: fraction of >= ``min_mass`` bins with ratio within tolerance."""
    flags = []
    for axis in ("x", "y"):
        res = ratio(generated, reference, axis, normalize)
        sel = (res.reference_mass >= min_mass) & ~res.excluded
        flags.append(np.abs(res.ratio[sel] - 1.0) <= tolerance)
    flags = np.concatenate(flags)
    if flags.size == 0:
        raise EvaluationError("no spatial bins above the mass threshold")
    return float(flags.mean())


# --- photon yield -------------------------------------------------------------

@dataclass
class YieldBin:
    theta_lo: float
    theta_hi: float
    gen_mean: float
    gen_std: float
    gen_n: int
    ref_mean: float
    ref_std: float
    ref_n: int

    @property
    def missing(self) -> bool:
        return self.gen_n == 0 or self.ref_n == 0

    @property
    def relative_difference(self) -> float:
        if self.missing:
            return float("nan")
        return self.gen_mean / self.ref_mean - 1.0 if self.ref_mean else float("nan")


@dataclass
class YieldComparison:
    bins: list[YieldBin] = field(default_factory=list)

    @property
    def missing(self) -> list[YieldBin]:
        return [b for b in self.bins if b.missing]

    def max_abs_relative_difference(self) -> float:
        vals = [abs(b.relative_difference) for b in self.bins if not b.missing]
        if not vals:
            raise EvaluationError("no theta bin has both generated and reference tracks")
        return float(max(vals))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta_lo", "theta_hi", "gen_mean", "gen_std", "gen_n", "ref_mean", "ref_std", "ref_n",
                        "rel_diff", "missing"])
            for b in self.bins:
                w.writerow([b.theta_lo, b.theta_hi, b.gen_mean, b.gen_std, b.gen_n, b.ref_mean, b.ref_std,
                            b.ref_n, b.relative_difference, int(b.missing)])


def _mean_std(counts: np.ndarray) -> tuple[float, float]:
    if counts.size == 0:
        return float("nan"), float("nan")
    return float(counts.mean()), float(counts.std())


def yield_comparison(generated: Sequence[TrackRecord], reference: Sequence[TrackRecord],
                     theta_bin_width: float = 5.0, theta_edges: Sequence[float] | None = None) -> YieldComparison:
    """Mean and spread of hits per track in polar-angle bins.

    Default edges are multiples of ``theta_bin_width`` covering both sets.
    Bins where either side has no tracks are kept and marked ``missing``.
    """
    g_theta = np.array([t.theta for t in generated], dtype=np.float64)
    r_theta = np.array([t.theta for t in reference], dtype=np.float64)
    g_n = np.array([t.n_hits for t in generated], dtype=np.float64)
    r_n = np.array([t.n_hits for t in reference], dtype=np.float64)
    if theta_edges is None:
        both = np.concatenate([g_theta, r_theta])
        if both.size == 0:
            raise EvaluationError("yield comparison needs tracks")
        lo = math.floor(both.min() / theta_bin_width) * theta_bin_width
        hi = (math.floor(both.max() / theta_bin_width) + 1) * theta_bin_width
        theta_edges = np.arange(lo, hi + 0.5 * theta_bin_width, theta_bin_width)
    theta_edges = np.asarray(theta_edges, dtype=np.float64)
    out = YieldComparison()
    for lo, hi in zip(theta_edges[:-1], theta_edges[1:]):
        gs = g_n[(g_theta >= lo) & (g_theta < hi)]
        rs = r_n[(r_theta >= lo) & (r_theta < hi)]
        out.bins.append(YieldBin(float(lo), float(hi), *_mean_std(gs), int(gs.size), *_mean_std(rs), int(rs.size)))
    return out


# --- occupancy ----------------------------------------------------------------

def occupancy_map(tracks: Sequence[TrackRecord], grid: PixelGrid = PixelGrid()) -> np.ndarray:
    """Hit counts per pixel as an (n_rows, n_cols) array (row = y index)."""
    tracks = list(tracks)
    if not tracks:
        return np.zeros((grid.n_rows, grid.n_cols), dtype=np.int64)
    pixels = np.concatenate([t.pixels for t in tracks]).astype(np.int64)
    return np.bincount(pixels, minlength=grid.n_pixels).reshape(grid.n_rows, grid.n_cols)


def chi2_distance(a: np.ndarray, b: np.ndarray, normalize: bool = True) -> float:
    """Symmetric chi-square distance ``0.5 * sum (a - b)^2 / (a + b)`` over non-empty bins.

    With ``normalize`` both maps are scaled to unit sum first, so the
    distance compares shapes and lies in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"maps differ in shape: {a.shape} vs {b.shape}")
    if normalize:
        if a.sum() <= 0 or b.sum() <= 0:
            raise EvaluationError("cannot normalise an empty map")
        a, b = a / a.sum(), b / b.sum()
    s = a + b
    nz = s > 0
    return float(0.5 * np.sum((a[nz] - b[nz]) ** 2 / s[nz]))


# --- classifier ---------------------------------------------------------------

@dataclass
class ClassifierMetrics:
    accuracy: float
    roc_auc: float
    n: int
    separation: list[SeparationEntry] = field(default_factory=list)

    @property
    def mean_separation(self) -> float:
        return float(np.mean([e.separation for e in self.separation])) if self.separation else float("nan")


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve for ``scores`` predicting ``labels == 1`` (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("ROC area is undefined for a single-class sample")
    u = stats.mannwhitneyu(pos, neg, alternative="two-sided").statistic
    return float(u / (pos.size * neg.size))


def score_metrics(probs: np.ndarray, labels: np.ndarray, thetas: np.ndarray | None = None,
                  theta_edges: Sequence[float] | None = None) -> ClassifierMetrics:
    """Metrics from class probabilities ``probs`` (n, 2) with labels 0 = pion, 1 = kaon.

    The per-theta separation is computed on the log-odds score
    ``ln p_pi - ln p_K`` so it reads like a DLL.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise EvaluationError("probabilities and labels do not line up")
    if np.unique(labels).size < 2:
        raise EvaluationError("ROC area is undefined for a single-class sample")
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    auc = roc_auc(probs[:, 1], labels)
    out = ClassifierMetrics(acc, auc, len(labels))
    if thetas is not None and theta_edges is not None:
        logodds = np.log(np.clip(probs[:, 0], 1e-300, None)) - np.log(np.clip(probs[:, 1], 1e-300, None))
        thetas = np.asarray(thetas, dtype=np.float64)
        for lo, hi in zip(theta_edges[:-1], theta_edges[1:]):
            sel = (thetas >= lo) & (thetas < hi)
            try:
                e = separation_power(logodds[sel & (labels == 0)], logodds[sel & (labels == 1)])
            except EvaluationError:
                continue
            e.theta_lo, e.theta_hi = float(lo), float(hi)
            out.separation.append(e)
    return out


def classifier_metrics(model, records: Sequence[TrackRecord], tokenizer=None,
                       theta_edges: Sequence[float] | None = None) -> ClassifierMetrics:
    """Evaluate a classifier-mode model on labelled tracks."""
    from ..errors import ModeError
    from ..model import CLASSIFIER
    from ..training import predict_scores

    if model.mode != CLASSIFIER:
        raise ModeError("classifier_metrics needs a classifier-mode model")
    labels = np.array([r.label for r in records])
    if np.unique(labels).size < 2:
        raise EvaluationError("ROC area is undefined for a single-class sample")
    probs = predict_scores(model, records, tokenizer)
    thetas = np.array([r.theta for r in records])
    return score_metrics(probs, labels, thetas, theta_edges)
