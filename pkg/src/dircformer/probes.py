"""Architecture probes shared by the self-test, the unit tests and acceptance.

Each probe builds its own inputs from a seed and returns a number to compare
with a tolerance, so callers decide what counts as a pass.
"""

from __future__ import annotations

import numpy as np
import torch

from . import tensor_core as tc
from .model import GENERATIVE, N_CONTEXT, DircTransformer, ModelConfig
from .training import generative_loss
from .data import collate
from .records import TrackRecord
from .tokenizer import Tokenizer


def tiny_model(d_model: int = 16, n_heads: int = 2, n_blocks: int = 1, seed: int = 0,
               dtype=torch.float64, mode: str = GENERATIVE, tokenizer: Tokenizer | None = None) -> DircTransformer:
    cfg = ModelConfig.for_tokenizer(tokenizer or Tokenizer(), d_model=d_model, n_heads=n_heads,
                                    n_mhsa_blocks=n_blocks)
    return DircTransformer.create(cfg, mode, seed=seed, dtype=dtype)


def random_tokens(model: DircTransformer, batch: int, length: int, seed: int) -> tuple[torch.Tensor, ...]:
    """SOS-led random token streams plus random in-range kinematics."""
    gen = torch.Generator().manual_seed(seed)
    # ordinary tokens only: the last four ids of each vocabulary are specials
    s = torch.randint(0, model.cfg.spatial_vocab - 4, (batch, length), generator=gen)
    t = torch.randint(0, model.cfg.time_vocab - 4, (batch, length), generator=gen)
    s[:, 0] = model.cfg.spatial_vocab - 4
    t[:, 0] = model.cfg.time_vocab - 4
    p = 1.0 + 9.0 * torch.rand(batch, generator=gen, dtype=torch.float64)
    th = 25.0 + 135.0 * torch.rand(batch, generator=gen, dtype=torch.float64)
    return s, t, p, th


@torch.no_grad()
def causal_probe(model: DircTransformer, length: int = 12, batch: int = 2, seed: int = 0) -> dict[str, float]:
    """Largest change of earlier-position logits when later tokens are replaced.

    The ``spatial`` entry perturbs only the spatial stream, which reaches the
    network solely as cross-attention keys/values; the ``time`` entry perturbs
    the time stream (cross-attention queries, then self-attention).
    """
    model.eval()
    s, t, p, th = random_tokens(model, batch, length, seed)
    base = model.forward_generative(s, t, p, th)
    gen = torch.Generator().manual_seed(seed + 1)
    worst = {"spatial": 0.0, "time": 0.0}
    for cut in range(1, length):
        for stream in worst:
            s2, t2 = s.clone(), t.clone()
            target, vocab = (s2, model.cfg.spatial_vocab) if stream == "spatial" else (t2, model.cfg.time_vocab)
            target[:, cut:] = torch.randint(0, vocab - 4, (batch, length - cut), generator=gen)
            out = model.forward_generative(s2, t2, p, th)
            keep = N_CONTEXT + cut  # assembled positions < keep only see tokens < cut
            for a, b in ((base.spatial_logits, out.spatial_logits), (base.time_logits, out.time_logits)):
                worst[stream] = max(worst[stream], float((a[:, :keep] - b[:, :keep]).abs().max()))
    return worst


@torch.no_grad()
def qk_scale_probe(model: DircTransformer, factors=(10.0, 0.1), length: int = 10, seed: int = 0) -> float:
    """Largest change in any attention map when Q and K projections are rescaled.

    Multiplies every query projection (weight and bias) by ``factors[0]`` and
    every key projection by ``factors[1]``; the l2 normalisation should make
    the post-softmax weights unchanged.  The model is restored afterwards.
    """
    model.eval()
    s, t, p, th = random_tokens(model, 2, length, seed)
    se, te = model.embed_streams(s, t, p, th)
    allowed = model.attention_mask(None, 2, se.shape[1], causal=True)

    def maps():
        out = []
        x = te
        hq, hkv = model.cmhca.attention_inputs(x, se)
        out.append(model.cmhca.attn.weights(hq, hkv, allowed))
        x = model.cmhca(x, allowed, kv=se)
        for block in model.blocks:
            hq, _ = block.attention_inputs(x)
            out.append(block.attn.weights(hq, hq, allowed))
            x = block(x, allowed)
        return out

    before = maps()
    attns = [model.cmhca.attn] + [b.attn for b in model.blocks]
    saved = [(a.q.weight.clone(), a.q.bias.clone(), a.k.weight.clone(), a.k.bias.clone()) for a in attns]
    try:
        for a in attns:
            a.q.weight.mul_(factors[0]); a.q.bias.mul_(factors[0])
            a.k.weight.mul_(factors[1]); a.k.bias.mul_(factors[1])
        after = maps()
    finally:
        for a, (qw, qb, kw, kb) in zip(attns, saved):
            a.q.weight.copy_(qw); a.q.bias.copy_(qb); a.k.weight.copy_(kw); a.k.bias.copy_(kb)
    return max(float((x - y).abs().max()) for x, y in zip(before, after))


def _probe_batch(tokenizer: Tokenizer, seed: int, n_tracks: int = 2, n_hits: int = 4):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_tracks):
        n = n_hits + i
        rec = TrackRecord("pion", float(rng.uniform(1, 10)), float(rng.uniform(25, 160)),
                          rng.integers(0, tokenizer.grid.n_pixels, n), rng.uniform(0, 100, n)).sorted()
        pairs.append(tokenizer.encode(rec))
    return collate(pairs, tokenizer)


def model_gradient_check(model: DircTransformer, tokenizer: Tokenizer | None = None, seed: int = 0,
                         entries_per_tensor: int = 6, eps: float = 1e-6, floor: float = 1e-5) -> float:
    """Worst relative autograd-vs-central-difference error of the generative loss.

    Checks, for every parameter tensor, the entries with the largest analytic
    gradients plus a few random ones (vocabulary tables are mostly zero
    gradient).  Needs a float64 model.

    The error is ``|a - n| / max(|a|, |n|, floor)``.  Central differences of a
    loss of size ~10 carry ~1e-9 rounding noise at ``eps=1e-6``, so entries
    with gradients far below ``floor`` are judged on absolute error instead.
    """
    if model.dtype != torch.float64:
        raise ValueError("gradient checks need a float64 model")
    tokenizer = tokenizer or Tokenizer()
    batch = _probe_batch(tokenizer, seed)
    model.eval()

    def loss():
        return generative_loss(model.forward(batch), batch).total

    model.zero_grad(set_to_none=True)
    loss().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            k = min(entries_per_tensor, p.numel())
            idx = set(torch.topk(g.abs(), k).indices.tolist())
            idx.update(rng.choice(p.numel(), size=min(2, p.numel()), replace=False).tolist())
            flat = p.view(-1)
            for i in sorted(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = g[i].item()
                worst = max(worst, tc.max_relative_error(torch.tensor([ana]), torch.tensor([num]), floor))
    model.zero_grad(set_to_none=True)
    return worst


def op_gradient_checks(seed: int = 0) -> dict[str, float]:
    """Finite-difference checks of each tensor_core op at float64."""
    gen = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    w_out = rnd(3, 5)
    mask = torch.tensor([[True, True, False, True, True]] * 3)
    targets = torch.tensor([1, 4, 0])
    ce_mask = torch.tensor([True, False, True])
    checks = {
        "softmax": (lambda x: (tc.softmax_lastdim(x, mask) * w_out).sum(), [rnd(3, 5)]),
        "l2_normalize": (lambda x: (tc.l2_normalize_rows(x) * w_out).sum(), [rnd(3, 5)]),
        "gelu": (lambda x: (tc.gelu(x) * w_out).sum(), [rnd(3, 5)]),
        "layer_norm": (lambda x, g, b: (tc.layer_norm(x, g, b) * w_out).sum(), [rnd(3, 5), rnd(5), rnd(5)]),
        "matmul": (lambda a, b: (tc.matmul(a, b) * w_out).sum(), [rnd(3, 4), rnd(4, 5)]),
        "linear": (lambda x, w, b: (tc.linear(x, w, b) * w_out).sum(), [rnd(3, 4), rnd(5, 4), rnd(5)]),
        "embedding": (lambda t: (tc.embedding_lookup(t, torch.tensor([2, 0, 2])) * w_out).sum(), [rnd(4, 5)]),
        "log_softmax": (lambda x: (tc.log_softmax_lastdim(x) * w_out).sum(), [rnd(3, 5)]),
        "cross_entropy": (lambda x: tc.masked_cross_entropy(x, targets, ce_mask)[0], [rnd(3, 5)]),
    }
    return {name: tc.gradient_check(fn, inputs) for name, (fn, inputs) in checks.items()}


# --- tokenizer and sampler ----------------------------------------------------

def tokenizer_roundtrips(tokenizer: Tokenizer | None = None, n_samples: int = 10_000,
                         seed: int = 0) -> dict[str, float]:
    """Pixel round-trip mismatches, worst time error / half bin width, monotonicity violations."""
    from .tokenizer import detokenize_time, pixel_to_xy, tokenize_time, xy_to_pixel

    tokenizer = tokenizer or Tokenizer()
    grid, binning = tokenizer.grid, tokenizer.binning
    ids = np.arange(grid.n_pixels)
    x, y = pixel_to_xy(ids, grid)
    pixel_mismatch = int(np.sum(xy_to_pixel(x, y, grid) != ids))
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(binning.t_min, binning.t_max, n_samples))
    k = tokenize_time(t, binning)
    err = np.abs(detokenize_time(k, binning) - t).max() / (0.5 * binning.bin_width)
    return {"pixel_mismatches": pixel_mismatch, "time_error_over_half_bin": float(err),
            "monotone_violations": int(np.sum(np.diff(k) < 0))}


def brute_force_nucleus(probs: np.ndarray, p: float) -> np.ndarray:
    """Support of the smallest subset with mass >= p, by enumerating every subset.

    Among equally small subsets the heaviest wins.  Exponential in the
    vocabulary size: only for small test distributions without ties.
    """
    v = len(probs)
    best, best_mass, best_size = None, -1.0, v + 1
    for bits in range(1, 1 << v):
        members = [i for i in range(v) if bits >> i & 1]
        mass = float(sum(probs[i] for i in members))
        if mass >= p and (len(members) < best_size or (len(members) == best_size and mass > best_mass)):
            best, best_mass, best_size = members, mass, len(members)
    support = np.zeros(v, dtype=bool)
    support[best] = True
    return support


def sampler_checks(n_dists: int = 1000, n_draws: int = 100_000, vocab: int = 8, seed: int = 0) -> dict[str, float]:
    """Nucleus filter vs subset oracle, draws outside the nucleus, temperature argmax changes."""
    from .generation import apply_temperature, nucleus_filter, sample_inverse_cdf

    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_dists):
        probs = rng.dirichlet(np.full(vocab, 0.5))
        p = float(rng.uniform(0.05, 0.999))
        mismatches += int(not np.array_equal(nucleus_filter(probs, p) > 0, brute_force_nucleus(probs, p)))
    probs = torch.as_tensor(rng.dirichlet(np.ones(64)))
    kept = nucleus_filter(probs, 0.9)
    draws = sample_inverse_cdf(kept.expand(n_draws, -1), rng.random(n_draws))
    outside = int(np.sum(kept.numpy()[draws] <= 0))
    logits = torch.as_tensor(rng.normal(size=(200, 50)) * 3)
    argmax_changes = 0
    for temp in (0.3, 0.7, 1.05, 2.0, 10.0):
        scaled = tc.softmax_lastdim(apply_temperature(logits, temp))
        argmax_changes += int((scaled.argmax(-1) != logits.argmax(-1)).sum())
    return {"nucleus_mismatches": mismatches, "draws_outside_nucleus": outside, "argmax_changes": argmax_changes}
