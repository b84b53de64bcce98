"""Split spatial/temporal vocabularies.

Pixels are already discrete and map one-to-one onto spatial tokens.  Time is
binned uniformly into its own vocabulary, so the joint (pixel, time)
vocabulary is never built.  Kinematics stay continuous and are carried next
to the token streams rather than inside them.

Assembled streams look like::

    spatial: [|p|, theta, SOS_p, p_1, ..., p_n, EOS_p]
    time:    [|p|, theta, SOS_t, t_1, ..., t_n, EOS_t]

where the two kinematic slots are injected as embeddings by the model; the
token arrays stored in :class:`TokenSequencePair` start at SOS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DecodeError,
    InvalidTokenError,
    OutOfRangeError,
    TruncationError,
)
from .records import DEFAULT_PHASE_SPACE, PhaseSpace, TrackRecord

MAX_HITS = 250
N_SPECIALS = 4
# Documentation only: the product vocabulary a joint tokenizer would need.
JOINT_VOCAB_SIZE = 6144 * 5920


@dataclass(frozen=True)
class PixelGrid:
    """Rectangular PMT readout plane, pixels numbered row-major from the origin corner."""

    n_cols: int = 96
    n_rows: int = 64
    pitch_x: float = 6.0
    pitch_y: float = 6.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.n_cols < 1 or self.n_rows < 1:
            raise ConfigError(f"grid needs at least one row and column, got {self.n_cols}x{self.n_rows}")
        if self.pitch_x <= 0 or self.pitch_y <= 0:
            raise ConfigError("pixel pitch must be positive")

    @property
    def n_pixels(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def width(self) -> float:
        return self.n_cols * self.pitch_x

    @property
    def height(self) -> float:
        return self.n_rows * self.pitch_y

    def to_dict(self) -> dict:
        return {"n_cols": self.n_cols, "n_rows": self.n_rows, "pitch_x": self.pitch_x,
                "pitch_y": self.pitch_y, "origin_x": self.origin_x, "origin_y": self.origin_y}


@dataclass(frozen=True)
class TimeBinning:
    """Uniform binning of [t_min, t_max) into ``n_bins`` time tokens.

    The default bin width is 25 ps over a 148 ns window, which keeps the
    5920-token time vocabulary.
    """

    t_min: float = 0.0
    t_max: float = 148.0
    n_bins: int = 5920

    def __post_init__(self):
        if self.n_bins < 1:
            raise ConfigError(f"n_bins must be >= 1, got {self.n_bins}")
        if not self.t_max > self.t_min:
            raise ConfigError(f"t_max ({self.t_max}) must exceed t_min ({self.t_min})")

    @property
    def bin_width(self) -> float:
        return (self.t_max - self.t_min) / self.n_bins

    def to_dict(self) -> dict:
        return {"t_min": self.t_min, "t_max": self.t_max, "n_bins": self.n_bins}


@dataclass(frozen=True)
class SpecialTokens:
    """Special ids appended after a base vocabulary of size ``base``."""

    base: int

    @property
    def sos(self) -> int:
        return self.base

    @property
    def eos(self) -> int:
        return self.base + 1

    @property
    def pad(self) -> int:
        return self.base + 2

    @property
    def cls(self) -> int:
        return self.base + 3

    @property
    def size(self) -> int:
        """Vocabulary size including the specials."""
        return self.base + N_SPECIALS

    def is_special(self, token) -> np.ndarray | bool:
        return np.asarray(token) >= self.base


@dataclass(frozen=True)
class KinematicContext:
    momentum: float
    theta: float
    extrapolate: bool = False
    bounds: PhaseSpace = field(default=DEFAULT_PHASE_SPACE, compare=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.momentum) or not np.isfinite(self.theta):
            raise OutOfRangeError("non-finite kinematics", value=(self.momentum, self.theta))
        if not self.extrapolate and not self.bounds.contains(self.momentum, self.theta):
            raise OutOfRangeError(
                f"kinematics (p={self.momentum}, theta={self.theta}) outside the phase space "
                f"{self.bounds.as_list()}; pass extrapolate=True to allow",
                value=(self.momentum, self.theta),
            )

    @property
    def in_phase_space(self) -> bool:
        return self.bounds.contains(self.momentum, self.theta)


@dataclass
class TokenSequencePair:
    """Aligned spatial/time token streams (SOS ... EOS) plus continuous context."""

    spatial_tokens: np.ndarray
    time_tokens: np.ndarray
    context: KinematicContext
    valid_len: int
    pid: str | None = None

    def __post_init__(self):
        self.spatial_tokens = np.asarray(self.spatial_tokens, dtype=np.int64)
        self.time_tokens = np.asarray(self.time_tokens, dtype=np.int64)
        if self.spatial_tokens.shape != self.time_tokens.shape:
            raise DecodeError(
                f"stream lengths differ: spatial {self.spatial_tokens.size}, time {self.time_tokens.size}"
            )

    def __len__(self) -> int:
        return int(self.spatial_tokens.size)


# --- time -------------------------------------------------------------------

def tokenize_time(t, binning: TimeBinning):
    """Map time(s) in ns to bin index; scalar in, int out; array in, array out."""
    arr = np.asarray(t, dtype=np.float64)
    bad = ~((arr >= binning.t_min) & (arr < binning.t_max))
    if np.any(bad):
        offending = arr[bad].ravel()[0] if arr.ndim else float(arr)
        raise OutOfRangeError(
            f"time {offending} ns outside [{binning.t_min}, {binning.t_max})", value=float(offending)
        )
    # scale by n_bins/(t_max - t_min) rather than dividing by bin_width: bin centers round-trip exactly
    k = np.floor((arr - binning.t_min) * binning.n_bins / (binning.t_max - binning.t_min))
    k = np.clip(k, 0, binning.n_bins - 1).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def detokenize_time(k, binning: TimeBinning):
    """Bin center for time token(s)."""
    arr = np.asarray(k)
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidTokenError(f"time token must be integer, got {arr.dtype}", value=k)
    bad = (arr < 0) | (arr >= binning.n_bins)
    if np.any(bad):
        offending = int(arr[bad].ravel()[0]) if arr.ndim else int(arr)
        raise InvalidTokenError(
            f"time token {offending} is not a time bin (vocabulary has {binning.n_bins} bins)",
            value=offending,
        )
    t = binning.t_min + (arr.astype(np.float64) + 0.5) * binning.bin_width
    return float(t) if t.ndim == 0 else t


# --- space ------------------------------------------------------------------

def pixel_to_xy(p, grid: PixelGrid):
    """Pixel center(s) in mm, row-major layout."""
    arr = np.asarray(p)
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidTokenError(f"pixel id must be integer, got {arr.dtype}", value=p)
    bad = (arr < 0) | (arr >= grid.n_pixels)
    if np.any(bad):
        offending = int(arr[bad].ravel()[0]) if arr.ndim else int(arr)
        raise InvalidTokenError(f"pixel id {offending} outside [0, {grid.n_pixels})", value=offending)
    col = arr % grid.n_cols
    row = arr // grid.n_cols
    x = grid.origin_x + (col + 0.5) * grid.pitch_x
    y = grid.origin_y + (row + 0.5) * grid.pitch_y
    if np.ndim(x) == 0:
        return float(x), float(y)
    return x, y


def xy_to_pixel(x, y, grid: PixelGrid):
    """Pixel containing point(s) (x, y) in mm."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    col = np.floor((xa - grid.origin_x) / grid.pitch_x).astype(np.int64)
    row = np.floor((ya - grid.origin_y) / grid.pitch_y).astype(np.int64)
    bad = (col < 0) | (col >= grid.n_cols) | (row < 0) | (row >= grid.n_rows)
    if np.any(bad):
        raise OutOfRangeError("point outside the readout plane", value=(x, y))
    p = row * grid.n_cols + col
    return int(p) if p.ndim == 0 else p


# --- sequences --------------------------------------------------------------

@dataclass(frozen=True)
class Tokenizer:
    """Bundle of grid, time binning and the two special-token layouts."""

    grid: PixelGrid = field(default_factory=PixelGrid)
    binning: TimeBinning = field(default_factory=TimeBinning)
    max_hits: int = MAX_HITS

    @property
    def spatial(self) -> SpecialTokens:
        return SpecialTokens(self.grid.n_pixels)

    @property
    def temporal(self) -> SpecialTokens:
        return SpecialTokens(self.binning.n_bins)

    @property
    def spatial_vocab(self) -> int:
        return self.spatial.size

    @property
    def time_vocab(self) -> int:
        return self.temporal.size

    def encode(self, track: TrackRecord, bounds: PhaseSpace = DEFAULT_PHASE_SPACE,
               truncate: bool = False) -> TokenSequencePair:
        return build_sequence_pair(track, self.grid, self.binning, bounds=bounds,
                                   max_hits=self.max_hits, truncate=truncate)

    def decode(self, seq: TokenSequencePair, pid: str | None = None) -> TrackRecord:
        return strip_and_decode(seq, self.grid, self.binning, pid=pid)


def build_sequence_pair(track: TrackRecord, grid: PixelGrid, binning: TimeBinning,
                        bounds: PhaseSpace = DEFAULT_PHASE_SPACE, max_hits: int = MAX_HITS,
                        truncate: bool = False) -> TokenSequencePair:
    """Canonically order a track's hits and wrap both streams with SOS/EOS.

    Raises :class:`TruncationError` when the track exceeds ``max_hits`` unless
    ``truncate`` is set, in which case the earliest ``max_hits`` hits are kept.
    """
    n = track.n_hits
    if n > max_hits and not truncate:
        raise TruncationError(f"track has {n} hits, budget is {max_hits}", value=n)
    ordered = track.sorted()
    pixels, times = ordered.pixels[:max_hits], ordered.times[:max_hits]
    if pixels.size:
        bad = (pixels < 0) | (pixels >= grid.n_pixels)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise InvalidTokenError(f"pixel id {int(pixels[i])} outside the grid", value=int(pixels[i]),
                                    position=i)
    sp, tp = SpecialTokens(grid.n_pixels), SpecialTokens(binning.n_bins)
    t_tok = tokenize_time(times, binning) if times.size else np.zeros(0, dtype=np.int64)
    spatial = np.concatenate([[sp.sos], pixels, [sp.eos]]).astype(np.int64)
    temporal = np.concatenate([[tp.sos], t_tok, [tp.eos]]).astype(np.int64)
    ctx = KinematicContext(track.momentum, track.theta,
                           extrapolate=not bounds.contains(track.momentum, track.theta), bounds=bounds)
    return TokenSequencePair(spatial, temporal, ctx, valid_len=int(spatial.size), pid=track.pid)


def _first_eos(tokens: np.ndarray, specials: SpecialTokens, stream: str) -> int:
    if tokens.size == 0 or tokens[0] != specials.sos:
        first = int(tokens[0]) if tokens.size else None
        raise DecodeError(f"{stream} stream must start with SOS, found {first}", value=first, position=0)
    eos = np.flatnonzero(tokens == specials.eos)
    return int(eos[0]) if eos.size else -1


def strip_and_decode(seq: TokenSequencePair, grid: PixelGrid, binning: TimeBinning,
                     pid: str | None = None) -> TrackRecord:
    """Inverse of :func:`build_sequence_pair` (times come back as bin centers).

    Tokens after the first EOS of either stream are ignored; a pair without
    any EOS decodes every position and is marked truncated.
    """
    sp, tp = SpecialTokens(grid.n_pixels), SpecialTokens(binning.n_bins)
    s = seq.spatial_tokens[: seq.valid_len]
    t = seq.time_tokens[: seq.valid_len]
    es = _first_eos(s, sp, "spatial")
    et = _first_eos(t, tp, "time")
    ends = [e for e in (es, et) if e >= 0]
    end = min(ends) if ends else int(s.size)
    body_s, body_t = s[1:end], t[1:end]
    for name, body, specials in (("spatial", body_s, sp), ("time", body_t, tp)):
        bad = np.flatnonzero((body < 0) | (body >= specials.base))
        if bad.size:
            pos = int(bad[0]) + 1
            raise DecodeError(
                f"{name} stream has special/invalid token {int(body[bad[0]])} at position {pos}",
                value=int(body[bad[0]]), position=pos,
            )
    times = detokenize_time(body_t, binning) if body_t.size else np.zeros(0)
    rec = TrackRecord(pid or seq.pid or "pion", seq.context.momentum, seq.context.theta,
                      body_s.copy(), np.asarray(times, dtype=np.float64), truncated=not ends)
    return rec.sorted()
