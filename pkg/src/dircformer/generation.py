"""Autoregressive sampling of (pixel, time) hit sequences."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from . import tensor_core as tc
from .errors import ConfigError
from .model import GENERATIVE, N_CONTEXT, DircTransformer
from .records import TrackRecord
from .tokenizer import MAX_HITS, KinematicContext, Tokenizer, detokenize_time

EOS_POLICIES = ("joint", "both", "either")


@dataclass(frozen=True)
class GenerationPolicy:
    nucleus_p: float = 0.995
    temperature: float = 1.05
    max_hits: int = MAX_HITS
    seed: int = 0
    eos_policy: str = "joint"
    sampler: str = "nucleus"
    top_k: int = 0

    def __post_init__(self):
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError(f"nucleus_p must lie in (0, 1], got {self.nucleus_p}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.max_hits <= MAX_HITS:
            raise ConfigError(f"max_hits must lie in [0, {MAX_HITS}]")
        if self.eos_policy not in EOS_POLICIES:
            raise ConfigError(f"eos_policy must be one of {EOS_POLICIES}")
        if self.sampler not in ("nucleus", "top_k"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "top_k" and self.top_k < 1:
            raise ConfigError("top_k sampler needs top_k >= 1")

    def with_(self, **changes) -> "GenerationPolicy":
        return replace(self, **changes)


def apply_temperature(logits, temperature: float):
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return logits / temperature


def nucleus_filter(probs, p: float):
    """Keep the smallest most-probable prefix with mass >= p and renormalise.

    Ties in probability are ordered by ascending token id.  Works on the last
    axis of a torch tensor or numpy array; excluded tokens get exactly 0.
    """
    if p <= 0 or p > 1:
        raise ConfigError(f"nucleus mass must lie in (0, 1], got {p}")
    as_numpy = isinstance(probs, np.ndarray)
    x = torch.as_tensor(probs, dtype=torch.float64)
    if p >= 1.0:
        out = x / x.sum(dim=-1, keepdim=True)
    else:
        out = torch.where(_nucleus_mask(x, p), x, torch.zeros_like(x))
        out = out / out.sum(dim=-1, keepdim=True)
    return out.numpy() if as_numpy else out


# log2-probability buckets per octave used to locate the nucleus boundary
_BUCKETS_PER_OCTAVE = 64
_MAX_OCTAVES = 64


def _nucleus_mask(x: torch.Tensor, p: float) -> torch.Tensor:
    """Boolean mask of the nucleus of each row of ``x`` (rows sum to 1).

    Sorting a full vocabulary per step dominates sampling time, so tokens are
    first grouped into narrow log-probability buckets (one O(V) pass).  Every
    bucket above the one where the cumulative mass crosses ``p`` is kept
    whole, every bucket below it is dropped, and only the boundary bucket is
    sorted.  Ties at the cut keep the lowest token ids.
    """
    n_buckets = _BUCKETS_PER_OCTAVE * _MAX_OCTAVES
    # zero-probability tokens land in the last bucket and add no mass
    key = (torch.log2(x) * -_BUCKETS_PER_OCTAVE).floor_().clamp_(0, n_buckets - 1).long()
    mass = torch.zeros(x.shape[:-1] + (n_buckets,), dtype=x.dtype).scatter_add_(-1, key, x)
    cum = torch.cumsum(mass, dim=-1)
    boundary = (cum < p).sum(dim=-1, keepdim=True).clamp_max(n_buckets - 1)
    before_boundary = (cum - mass).gather(-1, boundary)
    inside = key == boundary
    width = int(inside.sum(dim=-1).max())
    vals = torch.topk(torch.where(inside, x, torch.zeros_like(x)), width, dim=-1, sorted=True).values
    before = before_boundary + torch.cumsum(vals, dim=-1) - vals
    n_inside = ((before < p) & (vals > 0)).sum(dim=-1, keepdim=True).clamp_min(1)
    cut = vals.gather(-1, n_inside - 1)
    n_keep = (key < boundary).sum(dim=-1, keepdim=True) + n_inside
    keep = x >= cut
    if bool((keep.sum(dim=-1, keepdim=True) == n_keep).all()):
        return keep
    above = x > cut
    tie_rank = torch.cumsum((x == cut).to(torch.int64), dim=-1)
    return above | ((x == cut) & (tie_rank <= n_keep - above.sum(dim=-1, keepdim=True)))


def top_k_filter(probs, k: int):
    x = torch.as_tensor(probs, dtype=torch.float64)
    k = min(k, x.shape[-1])
    _, order = torch.sort(x, dim=-1, descending=True, stable=True)
    keep = torch.zeros_like(x, dtype=torch.bool).scatter(-1, order[..., :k], True)
    out = torch.where(keep, x, torch.zeros_like(x))
    return out / out.sum(dim=-1, keepdim=True)


def sample_inverse_cdf(probs: torch.Tensor, u: np.ndarray) -> np.ndarray:
    """Token per row from uniform draws ``u`` (shape (B,)) by inverting the CDF."""
    cdf = torch.cumsum(probs, dim=-1)
    u_t = torch.as_tensor(u, dtype=cdf.dtype).unsqueeze(-1) * cdf[..., -1:]
    idx = torch.searchsorted(cdf, u_t, right=True).squeeze(-1)
    idx = torch.minimum(idx, torch.full_like(idx, probs.shape[-1] - 1))
    # never land on a zero-probability token through float ties at the edge
    bad = probs.gather(-1, idx.unsqueeze(-1)).squeeze(-1) <= 0
    if bad.any():
        for r in bad.nonzero().flatten().tolist():
            nz = torch.nonzero(probs[r] > 0).flatten()
            idx[r] = nz[torch.searchsorted(nz, idx[r]).clamp_max(nz.numel() - 1)]
    return idx.numpy()


def _filtered_probs(logits: torch.Tensor, policy: GenerationPolicy, banned: list[int]) -> torch.Tensor:
    logits = logits.to(torch.float64, copy=True)
    logits[:, banned] = float("-inf")
    # rows always keep ordinary tokens, so the plain softmax cannot see all -inf
    probs = torch.softmax(apply_temperature(logits, policy.temperature), dim=-1)
    if policy.sampler == "top_k":
        return top_k_filter(probs, policy.top_k)
    return nucleus_filter(probs, policy.nucleus_p)


@dataclass
class GenerationStats:
    steps: int = 0
    async_eos: int = 0
    truncated: int = 0


def _seeds_for(n: int, seed: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


@torch.no_grad()
def generate_batch(kins: Sequence, model: DircTransformer, policy: GenerationPolicy = GenerationPolicy(),
                   tokenizer: Tokenizer | None = None, seeds: Sequence[int] | None = None,
                   pid: str = "pion", stats: GenerationStats | None = None) -> list[TrackRecord]:
    """Sample one track per kinematic point.

    Each sequence owns a generator seeded from ``seeds[i]`` (derived from
    ``policy.seed`` when omitted) and always consumes exactly two uniforms per
    step (time first, then pixel), so a track does not depend on which other
    tracks share its batch.

    Stopping follows ``policy.eos_policy``:

    ``joint``
        the time token decides.  If it is EOS the spatial stream ends at the
        same step; otherwise spatial EOS is excluded for that step.  The track
        length then follows one EOS head; with two independently sampled EOS
        heads the earlier stop is biased short.
    ``both`` / ``either``
        each stream stops at its own EOS (the other is padded); the sequence
        ends once both / either have.  Decoded hits stop at the earlier EOS.
    """
    if model.mode != GENERATIVE:
        from .errors import ModeError
        raise ModeError("generation needs a generative model")
    tokenizer = tokenizer or Tokenizer()
    if model.cfg.spatial_vocab != tokenizer.spatial_vocab or model.cfg.time_vocab != tokenizer.time_vocab:
        raise ConfigError("model vocabularies do not match the tokenizer")
    kins = [k if isinstance(k, KinematicContext) else KinematicContext(float(k[0]), float(k[1]), extrapolate=True)
            for k in kins]
    n = len(kins)
    if seeds is None:
        seeds = _seeds_for(n, policy.seed)
    if len(seeds) != n:
        raise ConfigError("need one seed per kinematic point")
    stats = stats if stats is not None else GenerationStats()
    rngs = [np.random.default_rng(s) for s in seeds]
    sp, tp = tokenizer.spatial, tokenizer.temporal
    banned_s = [sp.sos, sp.pad, sp.cls]
    banned_t = [tp.sos, tp.pad, tp.cls]

    spatial = torch.full((n, 1), sp.sos, dtype=torch.int64)
    time = torch.full((n, 1), tp.sos, dtype=torch.int64)
    eos_s = np.full(n, -1)
    eos_t = np.full(n, -1)
    momentum = torch.tensor([k.momentum for k in kins], dtype=torch.float64)
    theta = torch.tensor([k.theta for k in kins], dtype=torch.float64)
    active = np.ones(n, dtype=bool)
    was_training = model.training
    model.eval()
    for step in range(1, policy.max_hits + 2):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        stats.steps += 1
        idx = torch.from_numpy(rows)
        h = model.trunk(spatial[idx], time[idx], momentum[idx], theta[idx])
        s_logits, t_logits = model.heads(h[:, -1])
        u = np.array([[rngs[r].random(), rngs[r].random()] for r in rows])
        t_next = sample_inverse_cdf(_filtered_probs(t_logits, policy, banned_t), u[:, 0])
        if policy.eos_policy == "joint":
            time_eos = torch.from_numpy(t_next == tp.eos)
            s_logits = s_logits.masked_fill((~time_eos)[:, None] & (torch.arange(s_logits.shape[1]) == sp.eos),
                                            float("-inf"))
        s_next = sample_inverse_cdf(_filtered_probs(s_logits, policy, banned_s), u[:, 1])
        if policy.eos_policy == "joint":
            s_next = np.where(t_next == tp.eos, sp.eos, s_next)
        new_s = torch.full((n, 1), sp.pad, dtype=torch.int64)
        new_t = torch.full((n, 1), tp.pad, dtype=torch.int64)
        for j, r in enumerate(rows):
            new_s[r, 0] = sp.pad if eos_s[r] >= 0 else int(s_next[j])
            new_t[r, 0] = tp.pad if eos_t[r] >= 0 else int(t_next[j])
            if eos_s[r] < 0 and s_next[j] == sp.eos:
                eos_s[r] = step
            if eos_t[r] < 0 and t_next[j] == tp.eos:
                eos_t[r] = step
            done_s, done_t = eos_s[r] >= 0, eos_t[r] >= 0
            if (done_s and done_t) or (policy.eos_policy == "either" and (done_s or done_t)):
                active[r] = False
        spatial = torch.cat([spatial, new_s], dim=1)
        time = torch.cat([time, new_t], dim=1)
    model.train(was_training)

    out = []
    for i, k in enumerate(kins):
        ends = [e for e in (eos_s[i], eos_t[i]) if e >= 0]
        # without EOS the last step (index max_hits + 1) is over budget and dropped
        end = min(ends) if ends else min(policy.max_hits + 1, spatial.shape[1])
        if len(ends) == 1 or (len(ends) == 2 and eos_s[i] != eos_t[i]):
            stats.async_eos += 1
        truncated = not ends
        stats.truncated += int(truncated)
        pix = spatial[i, 1:end].numpy()
        tok = time[i, 1:end].numpy()
        times = detokenize_time(tok, tokenizer.binning) if tok.size else np.zeros(0)
        out.append(TrackRecord(pid, k.momentum, k.theta, pix, times, truncated=truncated).sorted())
    return out


def generate_track(kin, model: DircTransformer, policy: GenerationPolicy = GenerationPolicy(),
                   tokenizer: Tokenizer | None = None, pid: str = "pion") -> TrackRecord:
    """One track; identical to ``generate_batch([kin], seeds=[policy.seed])``."""
    return generate_batch([kin], model, policy, tokenizer, seeds=[policy.seed], pid=pid)[0]


def generate_many(kins: Sequence, model: DircTransformer, policy: GenerationPolicy = GenerationPolicy(),
                  tokenizer: Tokenizer | None = None, batch_size: int = 256, pid: str = "pion",
                  stats: GenerationStats | None = None) -> list[TrackRecord]:
    """Chunked :func:`generate_batch`; seeds are assigned per track up front."""
    seeds = _seeds_for(len(kins), policy.seed)
    out = []
    for s in range(0, len(kins), batch_size):
        out.extend(generate_batch(kins[s: s + batch_size], model, policy, tokenizer,
                                  seeds=seeds[s: s + batch_size], pid=pid, stats=stats))
    return out
