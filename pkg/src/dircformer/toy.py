"""Parametric toy optical box used as a ground-truth oracle.

This is not a detector model.  It reproduces the qualitative structure the
generator has to learn: Cherenkov rings whose radius follows
``cos(theta_c) = 1 / (n * beta)``, a yield that depends on kinematics, a
two-component (direct / reflected) time structure and reflections at the
edges of the readout plane that produce pixel-occupancy preferences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .records import DEFAULT_PHASE_SPACE, PhaseSpace, TrackRecord, pid_label
from .tokenizer import MAX_HITS, PixelGrid, TimeBinning

PARTICLE_MASSES = {"pion": 0.13957, "kaon": 0.493677}


@dataclass(frozen=True)
class ToyDetectorConfig:
    refractive_index: float = 1.473
    mass_pion: float = PARTICLE_MASSES["pion"]
    mass_kaon: float = PARTICLE_MASSES["kaon"]
    grid: PixelGrid = field(default_factory=PixelGrid)
    binning: TimeBinning = field(default_factory=TimeBinning)
    # ring center (mm) = (cx0 + cx_amp*cos(theta), cy0 + cy_amp*sin(theta))
    center_x0: float = 288.0
    center_x_amp: float = 228.0
    center_y0: float = 120.0
    center_y_amp: float = 48.0
    radius_scale: float = 144.0  # mm per radian of Cherenkov angle
    ring_smear: float = 6.0  # mm, Gaussian in radius
    # mean yield = base * sin^2(theta_c)/sin^2(theta_c,max) * (1 + path_coupling*|cos theta|)
    base_yield: float = 18.0
    path_coupling: float = 0.8
    # times in ns
    direct_t0: float = 12.0
    direct_t1: float = 10.0
    direct_sigma0: float = 0.6
    direct_sigma1: float = 0.02
    indirect_dt0: float = 15.0
    indirect_dt1: float = 10.0
    indirect_sigma0: float = 1.5
    indirect_sigma1: float = 0.03
    indirect_frac0: float = 0.4
    indirect_frac1: float = 0.15
    chromatic_time: float = 40.0  # ns per radian of (theta_c - theta_c,max)
    fold: bool = True
    max_hits: int = MAX_HITS

    def __post_init__(self):
        if self.refractive_index <= 1:
            raise ConfigError("refractive index must exceed 1")
        if self.mass_pion <= 0 or self.mass_kaon <= 0:
            raise ConfigError("particle masses must be positive")
        if self.radius_scale <= 0 or self.ring_smear < 0 or self.base_yield < 0:
            raise ConfigError("radius scale must be positive, smear and yield non-negative")

    def mass(self, pid: str) -> float:
        pid_label(pid)
        return self.mass_pion if pid == "pion" else self.mass_kaon

    def with_(self, **changes) -> "ToyDetectorConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["binning"] = self.binning.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDetectorConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown toy-detector keys: {sorted(unknown)}")
        if "grid" in d:
            d["grid"] = PixelGrid(**d["grid"])
        if "binning" in d:
            d["binning"] = TimeBinning(**d["binning"])
        return cls(**d)


def beta(momentum: float, mass: float) -> float:
    return momentum / math.sqrt(momentum * momentum + mass * mass)


def cherenkov_angle(pid: str, momentum: float, cfg: ToyDetectorConfig) -> float | None:
    """Cherenkov angle in radians, or None below threshold."""
    cos_tc = 1.0 / (cfg.refractive_index * beta(momentum, cfg.mass(pid)))
    if cos_tc >= 1.0:
        return None
    return math.acos(cos_tc)


def max_cherenkov_angle(cfg: ToyDetectorConfig) -> float:
    return math.acos(1.0 / cfg.refractive_index)


@dataclass(frozen=True)
class RingGeometry:
    theta_c: float
    radius: float
    direct_center: tuple[float, float]
    indirect_center: tuple[float, float]
    mean_yield: float
    direct_time: float
    indirect_time: float
    indirect_fraction: float


def ring_geometry(pid: str, momentum: float, theta: float, cfg: ToyDetectorConfig) -> RingGeometry | None:
    """Closed-form oracle quantities at one kinematic point (None below threshold)."""
    tc = cherenkov_angle(pid, momentum, cfg)
    if tc is None:
        return None
    th = math.radians(theta)
    tc_max = max_cherenkov_angle(cfg)
    cx = cfg.center_x0 + cfg.center_x_amp * math.cos(th)
    cy = cfg.center_y0 + cfg.center_y_amp * math.sin(th)
    mu = (cfg.base_yield * math.sin(tc) ** 2 / math.sin(tc_max) ** 2
          * (1.0 + cfg.path_coupling * abs(math.cos(th))))
    shift = cfg.chromatic_time * (tc - tc_max)
    t_dir = cfg.direct_t0 + cfg.direct_t1 * (1.0 - math.cos(th)) + shift
    t_ind = t_dir + cfg.indirect_dt0 + cfg.indirect_dt1 * math.sin(th)
    frac = min(max(cfg.indirect_frac0 + cfg.indirect_frac1 * math.cos(th), 0.0), 1.0)
    return RingGeometry(tc, cfg.radius_scale * tc, (cx, cy), (cx, cfg.grid.height - cy),
                        mu, t_dir, t_ind, frac)


def _fold(u: np.ndarray, length: float) -> np.ndarray:
    """Reflect coordinates into [0, length) like a mirror-walled box."""
    u = np.mod(u, 2.0 * length)
    u = np.where(u >= length, 2.0 * length - u, u)
    return np.minimum(u, np.nextafter(length, 0.0))


def toy_simulate_track(pid: str, momentum: float, theta: float,
                       cfg: ToyDetectorConfig | None = None, seed=None) -> TrackRecord:
    """Draw one track's hits from the oracle.

    Hits that leave the plane are reflected back when ``cfg.fold`` is set and
    dropped otherwise; hits outside the time window are dropped.
    """
    cfg = cfg or ToyDetectorConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    geo = ring_geometry(pid, momentum, theta, cfg)
    if geo is None:
        return TrackRecord(pid, momentum, theta, below_threshold=True)
    n = int(rng.poisson(geo.mean_yield))
    indirect = rng.random(n) < geo.indirect_fraction
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    r = geo.radius + cfg.ring_smear * rng.standard_normal(n)
    cx = np.where(indirect, geo.indirect_center[0], geo.direct_center[0])
    cy = np.where(indirect, geo.indirect_center[1], geo.direct_center[1])
    x = cx + r * np.cos(phi) - cfg.grid.origin_x
    y = cy + r * np.sin(phi) - cfg.grid.origin_y
    t_mean = np.where(indirect, geo.indirect_time, geo.direct_time)
    t_sigma = np.where(indirect, cfg.indirect_sigma0 + cfg.indirect_sigma1 * geo.indirect_time,
                       cfg.direct_sigma0 + cfg.direct_sigma1 * geo.direct_time)
    t = t_mean + t_sigma * rng.standard_normal(n)

    grid = cfg.grid
    if cfg.fold:
        x = _fold(x, grid.width)
        y = _fold(y, grid.height)
        keep = np.ones(n, dtype=bool)
    else:
        keep = (x >= 0) & (x < grid.width) & (y >= 0) & (y < grid.height)
    keep &= (t >= cfg.binning.t_min) & (t < cfg.binning.t_max)
    x, y, t = x[keep], y[keep], t[keep]
    col = np.minimum((x / grid.pitch_x).astype(np.int64), grid.n_cols - 1)
    row = np.minimum((y / grid.pitch_y).astype(np.int64), grid.n_rows - 1)
    rec = TrackRecord(pid, momentum, theta, row * grid.n_cols + col, t).sorted()
    if rec.n_hits > cfg.max_hits:
        rec = TrackRecord(pid, momentum, theta, rec.pixels[: cfg.max_hits], rec.times[: cfg.max_hits],
                          truncated=True)
    return rec


def sample_phase_space(n: int, bounds: PhaseSpace = DEFAULT_PHASE_SPACE, seed=None) -> np.ndarray:
    """``n`` independent uniform (momentum, theta) draws; shape (n, 2)."""
    if n < 1:
        raise ConfigError(f"need n >= 1 phase-space samples, got {n}")
    if not isinstance(bounds, PhaseSpace):
        bounds = PhaseSpace.from_list(bounds)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = rng.uniform(bounds.p_min, bounds.p_max, n)
    th = rng.uniform(bounds.theta_min, bounds.theta_max, n)
    return np.stack([p, th], axis=1)


def simulate_tracks(pid: str, kinematics, cfg: ToyDetectorConfig | None = None,
                    seed: int = 0) -> list[TrackRecord]:
    """Simulate one track per (momentum, theta) row with independent child seeds."""
    cfg = cfg or ToyDetectorConfig()
    kinematics = np.asarray(kinematics, dtype=np.float64).reshape(-1, 2)
    children = np.random.SeedSequence(seed).spawn(len(kinematics))
    return [toy_simulate_track(pid, float(p), float(th), cfg, np.random.default_rng(c))
            for (p, th), c in zip(kinematics, children)]


def simulate_dataset(pid: str, n_tracks: int, bounds: PhaseSpace = DEFAULT_PHASE_SPACE,
                     cfg: ToyDetectorConfig | None = None, seed: int = 0) -> list[TrackRecord]:
    ss = np.random.SeedSequence([seed, pid_label(pid)])
    kin_seed, track_seed = ss.spawn(2)
    kin = sample_phase_space(n_tracks, bounds, np.random.default_rng(kin_seed))
    return simulate_tracks(pid, kin, cfg, seed=int(track_seed.generate_state(1)[0]))


def simulate_fixed(pid: str, momentum: float, theta: float, n_tracks: int,
                   cfg: ToyDetectorConfig | None = None, seed: int = 0) -> list[TrackRecord]:
    kin = np.tile([momentum, theta], (n_tracks, 1))
    return simulate_tracks(pid, kin, cfg, seed)
