"""Track datasets on disk and padded training batches in memory.

File layout (all integers and floats little-endian)::

    b"DIRCFORMER-TRACKS\\n"                      magic line
    <JSON header, space padded>\\n               reserved block of HEADER_BYTES
    record * track_count

    record = u1 pid label | u1 flags | f8 momentum | f8 theta | u2 n_hits
             | u2 pixel * n_hits | f8 time * n_hits

The header block has a fixed size so a streaming writer can patch the final
track count in place.  See docs/format.md for the field-by-field description.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .errors import (
    ConfigError,
    IntegrityError,
    MalformedRecordError,
    MissingFileError,
    TruncatedPayloadError,
    TruncationError,
    VersionMismatchError,
    DatasetError,
)
from .records import DEFAULT_PHASE_SPACE, PIDS, PhaseSpace, TrackRecord
from .tokenizer import MAX_HITS, PixelGrid, TimeBinning, TokenSequencePair, Tokenizer

MAGIC = b"DIRCFORMER-TRACKS\n"
FORMAT_VERSION = 1
HEADER_BYTES = 2048
_REC_HEAD = struct.Struct("<BBddH")
_FLAG_TRUNCATED = 1
_FLAG_BELOW_THRESHOLD = 2


@dataclass
class DatasetHeader:
    pid: str
    track_count: int = 0
    phase_space: PhaseSpace = DEFAULT_PHASE_SPACE
    grid: PixelGrid = PixelGrid()
    binning: TimeBinning = TimeBinning()
    format_version: int = FORMAT_VERSION
    extra: dict | None = None

    def to_json(self) -> str:
        d = {
            "format_version": self.format_version,
            "pid": self.pid,
            "track_count": self.track_count,
            "phase_space": self.phase_space.as_list(),
            "grid": self.grid.to_dict(),
            "binning": self.binning.to_dict(),
            "extra": self.extra or {},
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DatasetHeader":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"unreadable dataset header: {exc}") from None
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"dataset format version {version}, reader supports {FORMAT_VERSION}")
        try:
            count = d["track_count"]
            if not isinstance(count, int) or count < 0:
                raise IntegrityError(f"invalid track_count field {count!r}")
            return cls(pid=d["pid"], track_count=count,
                       phase_space=PhaseSpace.from_list(d["phase_space"]),
                       grid=PixelGrid(**d["grid"]), binning=TimeBinning(**d["binning"]),
                       format_version=version, extra=d.get("extra") or {})
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"dataset header missing/invalid field: {exc}") from None


def _encode_record(rec: TrackRecord) -> bytes:
    label = PIDS.index(rec.pid)
    flags = (_FLAG_TRUNCATED if rec.truncated else 0) | (_FLAG_BELOW_THRESHOLD if rec.below_threshold else 0)
    n = rec.n_hits
    if n > 0xFFFF:
        raise DatasetError(f"track with {n} hits cannot be stored")
    return (_REC_HEAD.pack(label, flags, float(rec.momentum), float(rec.theta), n)
            + rec.pixels.astype("<u2").tobytes() + rec.times.astype("<f8").tobytes())


class DatasetWriter:
    """Single-writer streaming output; the header count is patched on close."""

    def __init__(self, path, header: DatasetHeader):
        self.path = Path(path)
        self.header = header
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(MAGIC)
        self._write_header()

    def _write_header(self):
        text = self.header.to_json().encode("ascii")
        if len(text) + 1 > HEADER_BYTES:
            raise DatasetError("dataset header exceeds reserved block")
        self._fh.write(text + b" " * (HEADER_BYTES - len(text) - 1) + b"\n")

    def write(self, rec: TrackRecord):
        if rec.pixels.size and (rec.pixels.min() < 0 or rec.pixels.max() >= self.header.grid.n_pixels):
            raise MalformedRecordError(f"record {self.count} has pixel ids outside the grid", self.count)
        self._fh.write(_encode_record(rec))
        self.count += 1

    def close(self):
        if self._fh.closed:
            return
        self.header.track_count = self.count
        self._fh.seek(len(MAGIC))
        self._write_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_dataset(path, records: Iterable[TrackRecord], pid: str | None = None,
                  phase_space: PhaseSpace = DEFAULT_PHASE_SPACE, grid: PixelGrid | None = None,
                  binning: TimeBinning | None = None, extra: dict | None = None) -> DatasetHeader:
    records = iter(records)
    first = next(records, None)
    if pid is None:
        pid = first.pid if first is not None else "pion"
    header = DatasetHeader(pid=pid, phase_space=phase_space, grid=grid or PixelGrid(),
                           binning=binning or TimeBinning(), extra=extra)
    with DatasetWriter(path, header) as w:
        if first is not None:
            w.write(first)
        for rec in records:
            w.write(rec)
    return header


class DatasetReader:
    """Streaming reader: iterating holds one record in memory at a time.

    With ``on_error="collect"`` malformed records are reported in
    :attr:`errors` (index and message) instead of raising; they are never
    dropped silently.
    """

    def __init__(self, path, on_error: str = "raise"):
        self.path = Path(path)
        if not self.path.exists():
            raise MissingFileError(f"dataset file not found: {self.path}")
        if on_error not in ("raise", "collect"):
            raise ConfigError("on_error must be 'raise' or 'collect'")
        self.on_error = on_error
        self.errors: list[tuple[int, str]] = []
        with open(self.path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise VersionMismatchError(f"{self.path} is not a track dataset (bad magic)")
            block = fh.read(HEADER_BYTES)
        if len(block) < HEADER_BYTES:
            raise TruncatedPayloadError("dataset header block is truncated")
        self.header = DatasetHeader.from_json(block.decode("ascii", errors="replace").strip())

    def __len__(self) -> int:
        return self.header.track_count

    def _malformed(self, index: int, message: str):
        if self.on_error == "raise":
            raise MalformedRecordError(f"record {index}: {message}", index)
        self.errors.append((index, message))

    def __iter__(self) -> Iterator[TrackRecord]:
        n_pix = self.header.grid.n_pixels
        with open(self.path, "rb") as raw:
            fh = io.BufferedReader(raw, buffer_size=1 << 16)
            fh.seek(len(MAGIC) + HEADER_BYTES)
            index = 0
            while True:
                head = fh.read(_REC_HEAD.size)
                if not head:
                    break
                if len(head) < _REC_HEAD.size:
                    raise TruncatedPayloadError(f"payload ends inside record {index}")
                if index >= self.header.track_count:
                    raise IntegrityError(
                        f"payload holds more records than the header count {self.header.track_count}"
                    )
                label, flags, momentum, theta, n = _REC_HEAD.unpack(head)
                body = fh.read(10 * n)
                if len(body) < 10 * n:
                    raise TruncatedPayloadError(f"payload ends inside record {index}")
                pixels = np.frombuffer(body, dtype="<u2", count=n).astype(np.int64)
                times = np.frombuffer(body, dtype="<f8", count=n, offset=2 * n).astype(np.float64)
                problem = None
                if label >= len(PIDS):
                    problem = f"unknown pid label {label}"
                elif not (np.isfinite(momentum) and np.isfinite(theta)):
                    problem = "non-finite kinematics"
                elif n and (pixels.max() >= n_pix):
                    problem = f"pixel id {int(pixels.max())} outside grid"
                elif n and not np.all(np.isfinite(times)):
                    problem = "non-finite hit time"
                if problem:
                    self._malformed(index, problem)
                else:
                    yield TrackRecord(PIDS[label], momentum, theta, pixels, times,
                                      truncated=bool(flags & _FLAG_TRUNCATED),
                                      below_threshold=bool(flags & _FLAG_BELOW_THRESHOLD))
                index += 1
            if index != self.header.track_count:
                raise IntegrityError(
                    f"header says {self.header.track_count} tracks, payload holds {index}"
                )


def read_dataset(path, on_error: str = "raise") -> tuple[DatasetHeader, list[TrackRecord]]:
    reader = DatasetReader(path, on_error=on_error)
    return reader.header, list(reader)


def export_jsonl(src, dst) -> int:
    """Line-delimited text dump of a dataset, one JSON object per track."""
    reader = DatasetReader(src)
    n = 0
    with open(dst, "w") as out:
        out.write(reader.header.to_json() + "\n")
        for rec in reader:
            out.write(json.dumps({"pid": rec.pid, "momentum": rec.momentum, "theta": rec.theta,
                                  "truncated": rec.truncated, "hits": rec.hits}) + "\n")
            n += 1
    return n


# --- batching ---------------------------------------------------------------

@dataclass
class Batch:
    """Padded token matrices for one mini-batch.

    ``loss_mask[b, j]`` marks token positions whose logits predict a real
    target at ``j + 1`` (SOS through the last hit); context slots, padding and
    the EOS position itself are excluded.
    """

    spatial: torch.Tensor
    time: torch.Tensor
    momentum: torch.Tensor
    theta: torch.Tensor
    token_mask: torch.Tensor
    loss_mask: torch.Tensor
    labels: torch.Tensor
    index: np.ndarray

    def __len__(self) -> int:
        return int(self.spatial.shape[0])

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())


def encode_records(records: Sequence[TrackRecord], tokenizer: Tokenizer,
                   bounds: PhaseSpace = DEFAULT_PHASE_SPACE, truncate: bool = False) -> list[TokenSequencePair]:
    return [tokenizer.encode(r, bounds=bounds, truncate=truncate) for r in records]


def collate(pairs: Sequence[TokenSequencePair], tokenizer: Tokenizer,
            index: np.ndarray | None = None, pad_to: int | None = None) -> Batch:
    lengths = np.array([len(p) for p in pairs], dtype=np.int64)
    width = int(lengths.max())
    if pad_to is not None:
        width = max(width, pad_to)
    b = len(pairs)
    spatial = np.full((b, width), tokenizer.spatial.pad, dtype=np.int64)
    time = np.full((b, width), tokenizer.temporal.pad, dtype=np.int64)
    for i, p in enumerate(pairs):
        spatial[i, : len(p)] = p.spatial_tokens
        time[i, : len(p)] = p.time_tokens
    pos = np.arange(width)[None, :]
    token_mask = pos < lengths[:, None]
    loss_mask = pos < (lengths[:, None] - 1)
    labels = np.array([PIDS.index(p.pid) if p.pid in PIDS else -1 for p in pairs], dtype=np.int64)
    return Batch(
        spatial=torch.from_numpy(spatial),
        time=torch.from_numpy(time),
        momentum=torch.tensor([p.context.momentum for p in pairs], dtype=torch.float64),
        theta=torch.tensor([p.context.theta for p in pairs], dtype=torch.float64),
        token_mask=torch.from_numpy(token_mask),
        loss_mask=torch.from_numpy(loss_mask),
        labels=torch.from_numpy(labels),
        index=np.arange(b) if index is None else np.asarray(index),
    )


def make_batches(records, tokenizer: Tokenizer, batch_size: int, max_len: int = MAX_HITS,
                 shuffle: bool = False, seed: int = 0, truncate: bool = False,
                 bucket: int = 0, bounds: PhaseSpace = DEFAULT_PHASE_SPACE) -> list[Batch]:
    """Split records (or pre-encoded pairs) into padded batches.

    ``bucket > 0`` groups ``bucket`` batches' worth of shuffled records by
    length before cutting, which cuts padding without changing the multiset
    of records seen per epoch.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    pairs = []
    for i, r in enumerate(records):
        if isinstance(r, TokenSequencePair):
            n_hits = len(r) - 2
            if n_hits > max_len:
                raise TruncationError(f"record {i} has {n_hits} hits > max_len {max_len}", value=n_hits,
                                      position=i)
            pairs.append(r)
            continue
        if r.n_hits > max_len and not truncate:
            raise TruncationError(f"record {i} has {r.n_hits} hits > max_len {max_len}", value=r.n_hits,
                                  position=i)
        pairs.append(build_pair_limited(r, tokenizer, max_len, bounds))
    order = np.arange(len(pairs))
    rng = np.random.default_rng(seed)
    if shuffle:
        order = rng.permutation(len(pairs))
    if bucket > 0:
        window = batch_size * bucket
        chunks = []
        for s in range(0, len(order), window):
            w = order[s: s + window]
            w = w[np.argsort([len(pairs[i]) for i in w], kind="stable")]
            chunks.extend(w[k: k + batch_size] for k in range(0, len(w), batch_size))
        if shuffle:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    else:
        chunks = [order[k: k + batch_size] for k in range(0, len(order), batch_size)]
    return [collate([pairs[i] for i in idx], tokenizer, index=idx) for idx in chunks]


def build_pair_limited(rec: TrackRecord, tokenizer: Tokenizer, max_len: int,
                       bounds: PhaseSpace = DEFAULT_PHASE_SPACE) -> TokenSequencePair:
    tok = Tokenizer(tokenizer.grid, tokenizer.binning, max_hits=min(max_len, tokenizer.max_hits))
    return tok.encode(rec, bounds=bounds, truncate=True)
