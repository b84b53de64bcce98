"""Numerical kernels used by the model, on top of torch autograd.

The small ops are written out so their guards are visible: max subtraction
in softmax, an epsilon floor in the row normalisation, zero output for fully
masked attention rows.  Ops that touch vocabulary-sized rows (the head
projections and the log-softmax inside the cross-entropy) use fused torch
kernels, since they dominate training time.  The
finite-difference checker at the bottom is the independent oracle for the
gradients autograd produces.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Sequence

import torch

from .errors import ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)


def set_precision(double: bool = False) -> torch.dtype:
    """Model dtype: float32 for training/inference, float64 for gradient checks."""
    return torch.float64 if double else torch.float32


def softmax_lastdim(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis.

    ``mask`` is either boolean (True = keep) or additive (0 / -inf), and must
    broadcast against ``x``.  Slices with every entry masked come back as
    zeros instead of NaN.
    """
    if mask is not None:
        try:
            torch.broadcast_shapes(mask.shape, x.shape)
        except RuntimeError:
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not broadcast to {tuple(x.shape)}") from None
        if mask.dtype == torch.bool:
            x = x.masked_fill(~mask, float("-inf"))
        else:
            x = x + mask
    m = x.amax(dim=-1, keepdim=True).detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(x - m)
    s = e.sum(dim=-1, keepdim=True)
    return e / s.clamp_min(torch.finfo(x.dtype).tiny)


def l2_normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Scale each last-axis row to unit length; all-zero rows stay zero."""
    # clamp before the sqrt: d sqrt(s)/ds is infinite at s = 0
    norm = torch.sqrt((x * x).sum(dim=-1, keepdim=True).clamp_min(eps * eps))
    return x / norm


def gelu(x: torch.Tensor) -> torch.Tensor:
    """GeLU, tanh approximation."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[1]}, got {tuple(x.shape)}")
    if bias is None:
        return matmul(x, weight.transpose(0, 1))
    flat = torch.addmm(bias, x.reshape(-1, x.shape[-1]), weight.transpose(0, 1))
    return flat.view(*x.shape[:-1], weight.shape[0])


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel():
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= table.shape[0]:
            bad = lo if lo < 0 else hi
            pos = (ids == bad).nonzero()[0].tolist()
            raise ShapeError(f"token id {bad} at position {pos} outside table of {table.shape[0]} rows")
    return table[ids]


def log_softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    # fused kernel; the vocabulary-sized rows make the unfused form memory bound
    return torch.log_softmax(x, dim=-1)


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                         mask: torch.Tensor | None = None) -> tuple[torch.Tensor, bool]:
    """Mean negative log-likelihood over unmasked positions.

    Returns ``(loss, all_masked)``.  An all-masked input yields a zero loss
    (still attached to the graph) and ``all_masked=True`` plus a warning.
    """
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    if mask.shape != targets.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match targets {tuple(targets.shape)}")
    n = int(mask.sum())
    if n == 0:
        warnings.warn("masked_cross_entropy: every position is masked", RuntimeWarning, stacklevel=2)
        return (logits * 0.0).sum(), True
    sel_logits = logits[mask] if not bool(mask.all()) else logits.reshape(-1, logits.shape[-1])
    sel_targets = targets[mask]
    nll = torch.nn.functional.nll_loss(log_softmax_lastdim(sel_logits), sel_targets, reduction="sum")
    return nll / n, False


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    if not training or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


# --- finite-difference oracle -------------------------------------------------

def finite_difference_grad(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                           eps: float = 1e-6) -> list[torch.Tensor]:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every input entry."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn(*inputs))
                flat[i] = orig - eps
                down = float(fn(*inputs))
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * eps)
            grads.append(g)
    return grads


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor) elementwise."""
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max()) if a.numel() else 0.0


def gradient_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                   eps: float = 1e-6, atol: float = 1e-9) -> float:
    """Compare autograd with central differences; returns the worst relative error.

    Entries where both gradients are below ``atol`` in magnitude are ignored,
    since their relative error is pure rounding noise.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ShapeError("gradient_check needs a scalar function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for g, x in zip(analytic, leaves)]
    numeric = finite_difference_grad(fn, [x.detach().clone() for x in inputs], eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        keep = (a.abs() > atol) | (n.abs() > atol)
        if keep.any():
            worst = max(worst, max_relative_error(a[keep], n[keep]))
    return worst
