"""Plain data records shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

PIDS = ("pion", "kaon")
PID_LABEL = {"pion": 0, "kaon": 1}


def pid_label(pid: str) -> int:
    try:
        return PID_LABEL[pid]
    except KeyError:
        raise ConfigError(f"unknown particle id {pid!r}; expected one of {PIDS}") from None


@dataclass(frozen=True)
class PhaseSpace:
    """Rectangular (momentum, polar angle) region; GeV/c and degrees."""

    p_min: float = 1.0
    p_max: float = 10.0
    theta_min: float = 25.0
    theta_max: float = 160.0

    def __post_init__(self):
        if not (self.p_max > self.p_min) or not (self.theta_max > self.theta_min):
            raise ConfigError(f"degenerate phase-space bounds: {self}")

    def contains(self, momentum: float, theta: float) -> bool:
        return self.p_min <= momentum <= self.p_max and self.theta_min <= theta <= self.theta_max

    def as_list(self) -> list[float]:
        return [self.p_min, self.p_max, self.theta_min, self.theta_max]

    @classmethod
    def from_list(cls, values) -> "PhaseSpace":
        values = [float(v) for v in values]
        if len(values) != 4:
            raise ConfigError(f"phase-space bounds need 4 numbers, got {len(values)}")
        return cls(*values)


DEFAULT_PHASE_SPACE = PhaseSpace()


@dataclass
class TrackRecord:
    """One charged track: kinematics, class and its (pixel, time) hits."""

    pid: str
    momentum: float
    theta: float
    pixels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))
    truncated: bool = False
    below_threshold: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.pixels.shape != self.times.shape:
            raise ConfigError(
                f"pixels ({self.pixels.size}) and times ({self.times.size}) differ in length"
            )

    @classmethod
    def from_hits(cls, pid: str, momentum: float, theta: float, hits, **kw) -> "TrackRecord":
        hits = list(hits)
        pixels = [h[0] for h in hits]
        times = [h[1] for h in hits]
        return cls(pid, momentum, theta, np.asarray(pixels, dtype=np.int64),
                   np.asarray(times, dtype=np.float64), **kw)

    @property
    def n_hits(self) -> int:
        return int(self.pixels.size)

    @property
    def hits(self) -> list[tuple[int, float]]:
        return [(int(p), float(t)) for p, t in zip(self.pixels, self.times)]

    @property
    def label(self) -> int:
        return pid_label(self.pid)

    def sorted(self) -> "TrackRecord":
        """Copy with hits in canonical order: ascending time, ties by pixel id."""
        order = np.lexsort((self.pixels, self.times))
        return TrackRecord(self.pid, self.momentum, self.theta, self.pixels[order],
                           self.times[order], self.truncated, self.below_threshold)

    def is_sorted(self) -> bool:
        if self.n_hits < 2:
            return True
        order = np.lexsort((self.pixels, self.times))
        return bool(np.all(order == np.arange(self.n_hits)))

    def same_hits(self, other: "TrackRecord") -> bool:
        return (np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.times, other.times))
