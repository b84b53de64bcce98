"""Product-Gaussian kernel density likelihoods for pion/kaon identification.

A :class:`KdeReference` holds the pooled hits of many reference tracks at one
kinematic point, as points in (x mm, y mm, t ns), plus one bandwidth per
axis.  The density of a hit is

    f(h) = 1 / (N (2 pi)^{3/2} h_x h_y h_t) * sum_j exp(-|(h - r_j) / bw|^2 / 2)

and a track's delta log-likelihood is ``sum_hits ln f_pi - ln f_K``, with
densities floored at ``DENSITY_FLOOR`` so a single hit far from every
reference point cannot dominate the sum.  Positive DLL favours the pion.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from ..errors import EvaluationError
from ..records import TrackRecord
from ..tokenizer import PixelGrid, pixel_to_xy
from .kernels import kernel_sums

DENSITY_FLOOR = 1e-12
MIN_REFERENCE_HITS = 1000
MIN_SEPARATION_SAMPLES = 10
# lower limits for Scott's rule when an axis has (nearly) no spread
MIN_BANDWIDTH = (0.5, 0.5, 0.01)


def hits_xyt(tracks: Sequence[TrackRecord] | TrackRecord, grid: PixelGrid = PixelGrid()) -> np.ndarray:
    """Pool the hits of ``tracks`` into an (n, 3) array of pixel-centre x, y (mm) and time (ns)."""
    if isinstance(tracks, TrackRecord):
        tracks = [tracks]
    pix = [t.pixels for t in tracks]
    if not pix or sum(len(p) for p in pix) == 0:
        return np.zeros((0, 3))
    pixels = np.concatenate(pix)
    times = np.concatenate([t.times for t in tracks])
    x, y = pixel_to_xy(pixels, grid)
    return np.column_stack([x, y, times]).astype(np.float64)


def scott_bandwidths(points: np.ndarray) -> np.ndarray:
    """Scott's rule ``sigma_k * n^(-1/(d+4))`` per axis, clamped below by ``MIN_BANDWIDTH``."""
    n, d = points.shape
    sigma = points.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    bw = sigma * n ** (-1.0 / (d + 4))
    return np.maximum(bw, np.asarray(MIN_BANDWIDTH[:d]))


@dataclass
class KdeReference:
    label: str
    points: np.ndarray
    bandwidths: np.ndarray
    n_tracks: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise EvaluationError(f"reference hits must have shape (n, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise EvaluationError(f"reference {self.label!r} has no hits")
        if self.bandwidths.shape != (3,) or not np.all(self.bandwidths > 0):
            raise EvaluationError(f"bandwidths must be three positive numbers, got {self.bandwidths}")
        self._scaled = self.points / self.bandwidths
        self._norm = len(self.points) * (2.0 * math.pi) ** 1.5 * float(np.prod(self.bandwidths))

    @property
    def n_hits(self) -> int:
        return len(self.points)

    @property
    def mean_yield(self) -> float:
        """Mean hits per reference track (needs ``n_tracks``)."""
        if self.n_tracks <= 0:
            raise EvaluationError(f"reference {self.label!r} does not record its track count")
        return self.n_hits / self.n_tracks

    def density(self, hits: np.ndarray, threads: int = 1) -> np.ndarray:
        hits = np.atleast_2d(np.asarray(hits, dtype=np.float64))
        if hits.size == 0:
            return np.zeros(0)
        return kernel_sums(hits / self.bandwidths, self._scaled, threads=threads) / self._norm

    def log_density(self, hits: np.ndarray, floor: float = DENSITY_FLOOR,
                    threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """``ln max(f, floor)`` per hit, and a mask of the hits that were floored."""
        f = self.density(hits, threads)
        low = f < floor
        return np.log(np.where(low, floor, f)), low


def kde_fit(reference, bandwidths=None, label: str = "", grid: PixelGrid = PixelGrid(),
            n_tracks: int | None = None) -> KdeReference:
    """Build a reference density from tracks or an (n, 3) hit array.

    ``bandwidths=None`` uses Scott's rule.  Fewer than ``MIN_REFERENCE_HITS``
    hits gives a warning; an empty reference is an error.
    """
    if isinstance(reference, np.ndarray):
        points = np.atleast_2d(reference).astype(np.float64)
        n_tracks = n_tracks or 0
    else:
        reference = list(reference)
        points = hits_xyt(reference, grid)
        n_tracks = len(reference) if n_tracks is None else n_tracks
    if points.size == 0:
        raise EvaluationError(f"cannot fit a KDE to an empty reference {label!r}")
    if len(points) < MIN_REFERENCE_HITS:
        warnings.warn(f"KDE reference {label!r} has only {len(points)} hits (< {MIN_REFERENCE_HITS})",
                      RuntimeWarning, stacklevel=2)
    bw = scott_bandwidths(points) if bandwidths is None else np.asarray(bandwidths, dtype=np.float64)
    return KdeReference(label, points, bw, n_tracks)


@dataclass
class DllResult:
    value: float
    n_hits: int
    n_floored: int = 0
    empty: bool = False


def _yield_term(n: int, ref_pi: KdeReference, ref_k: KdeReference) -> float:
    # Poisson log-likelihood ratio of the observed hit count
    lp, lk = ref_pi.mean_yield, ref_k.mean_yield
    return (n * math.log(lp) - lp - gammaln(n + 1)) - (n * math.log(lk) - lk - gammaln(n + 1))


def dll(track: TrackRecord, ref_pi: KdeReference, ref_k: KdeReference, grid: PixelGrid = PixelGrid(),
        floor: float = DENSITY_FLOOR, yield_term: bool = False, threads: int = 1) -> DllResult:
    """Delta log-likelihood ``ln L_pi - ln L_K`` of one track.

    A track without hits gives ``DllResult(0.0, 0, empty=True)`` (plus the
    yield term when requested).
    """
    return dll_many([track], ref_pi, ref_k, grid, floor, yield_term, threads)[0]


def dll_many(tracks: Sequence[TrackRecord], ref_pi: KdeReference, ref_k: KdeReference,
             grid: PixelGrid = PixelGrid(), floor: float = DENSITY_FLOOR, yield_term: bool = False,
             threads: int = 1) -> list[DllResult]:
    """:func:`dll` for many tracks, scoring all hits in one kernel pass per hypothesis."""
    tracks = list(tracks)
    counts = np.array([t.n_hits for t in tracks], dtype=np.int64)
    hits = hits_xyt(tracks, grid)
    lp, fp = ref_pi.log_density(hits, floor, threads)
    lk, fk = ref_k.log_density(hits, floor, threads)
    diff = lp - lk
    low = fp | fk
    if low.any():
        warnings.warn(f"density floor {floor:g} reached for {int(fp.sum())} pion / {int(fk.sum())} kaon "
                      "hit evaluations",
                      RuntimeWarning, stacklevel=2)
    out = []
    start = 0
    for n in counts:
        seg = slice(start, start + n)
        value = float(np.sum(diff[seg])) if n else 0.0
        if yield_term:
            value += _yield_term(int(n), ref_pi, ref_k)
        out.append(DllResult(value, int(n), int(low[seg].sum()), empty=bool(n == 0)))
        start += n
    return out


# --- separation power ---------------------------------------------------------

@dataclass
class SeparationEntry:
    mu_pi: float
    sigma_pi: float
    mu_k: float
    sigma_k: float
    n_pi: int
    n_k: int
    theta_lo: float = float("nan")
    theta_hi: float = float("nan")

    @property
    def separation(self) -> float:
        return abs(self.mu_pi - self.mu_k) / (0.5 * (self.sigma_pi + self.sigma_k))


@dataclass
class SeparationResult:
    entries: list[SeparationEntry] = field(default_factory=list)

    @property
    def mean(self) -> float:
        """Average separation over the theta bins."""
        if not self.entries:
            raise EvaluationError("no separation entries")
        return float(np.mean([e.separation for e in self.entries]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta_lo", "theta_hi", "mu_pi", "sigma_pi", "mu_k", "sigma_k", "n_pi", "n_k", "separation"])
            for e in self.entries:
                w.writerow([e.theta_lo, e.theta_hi, e.mu_pi, e.sigma_pi, e.mu_k, e.sigma_k, e.n_pi, e.n_k,
                            e.separation])


def _gauss(x, a, mu, sigma):
    return a * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def _gaussian_fit(values: np.ndarray) -> tuple[float, float]:
    mu0, s0 = float(values.mean()), float(values.std())
    counts, edges = np.histogram(values, bins=max(10, int(np.sqrt(len(values)))))
    centers = 0.5 * (edges[1:] + edges[:-1])
    try:
        (_, mu, sigma), _ = optimize.curve_fit(_gauss, centers, counts, p0=(counts.max(), mu0, s0),
                                               maxfev=5000)
    except (RuntimeError, optimize.OptimizeWarning) as exc:
        raise EvaluationError(f"Gaussian fit of the DLL distribution failed: {exc}") from None
    return float(mu), abs(float(sigma))


def _moments(values, name: str, method: str) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < MIN_SEPARATION_SAMPLES:
        raise EvaluationError(f"{name} DLL set has {len(values)} entries (< {MIN_SEPARATION_SAMPLES})")
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"{name} DLL set contains non-finite values")
    if method == "moments":
        mu, sigma = float(values.mean()), float(values.std())
    elif method == "fit":
        mu, sigma = _gaussian_fit(values) if values.std() > 0 else (float(values.mean()), 0.0)
    else:
        raise EvaluationError(f"unknown separation method {method!r}")
    if not sigma > 0:
        raise EvaluationError(f"{name} DLL set has zero variance")
    return mu, sigma


def separation_power(dll_pi, dll_k, method: str = "moments") -> SeparationEntry:
    """Separation ``|mu_pi - mu_K| / ((sigma_pi + sigma_K) / 2)`` of two DLL samples.

    ``method="moments"`` uses the sample mean and (population) standard
    deviation; ``"fit"`` fits a Gaussian to a histogram of each sample.
    """
    mu_p, s_p = _moments(dll_pi, "pion", method)
    mu_k, s_k = _moments(dll_k, "kaon", method)
    return SeparationEntry(mu_p, s_p, mu_k, s_k, len(dll_pi), len(dll_k))


def separation_scan(pi_tracks: Sequence[TrackRecord], k_tracks: Sequence[TrackRecord],
                    ref_pi_tracks: Sequence[TrackRecord], ref_k_tracks: Sequence[TrackRecord],
                    theta_edges: Sequence[float], grid: PixelGrid = PixelGrid(), bandwidths=None,
                    method: str = "moments", yield_term: bool = False, threads: int = 1) -> SeparationResult:
    """Per-theta-bin separation with references fitted from the tracks in each bin.

    Bins whose test or reference sets are empty are skipped.
    """
    def in_bin(tracks, lo, hi):
        return [t for t in tracks if lo <= t.theta < hi]

    result = SeparationResult()
    for lo, hi in zip(theta_edges[:-1], theta_edges[1:]):
        rp, rk = in_bin(ref_pi_tracks, lo, hi), in_bin(ref_k_tracks, lo, hi)
        tp, tk = in_bin(pi_tracks, lo, hi), in_bin(k_tracks, lo, hi)
        if not (rp and rk and tp and tk):
            continue
        kp = kde_fit(rp, bandwidths, "pion", grid)
        kk = kde_fit(rk, bandwidths, "kaon", grid)
        dp = [r.value for r in dll_many(tp, kp, kk, grid, yield_term=yield_term, threads=threads)]
        dk = [r.value for r in dll_many(tk, kp, kk, grid, yield_term=yield_term, threads=threads)]
        entry = separation_power(dp, dk, method)
        entry.theta_lo, entry.theta_hi = float(lo), float(hi)
        result.entries.append(entry)
    return result
