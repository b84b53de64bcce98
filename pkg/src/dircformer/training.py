"""Losses, the optimisation loop and the generative -> classifier fine-tuning path."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tensor_core as tc
from .data import Batch, make_batches
from .errors import ConfigError, DatasetError, NonFiniteLossError
from .model import (
    CLASSIFIER,
    GENERATIVE,
    N_CONTEXT,
    DircTransformer,
    ForwardOutput,
    ModelConfig,
    classifier_from_backbone,
    save_checkpoint,
)
from .records import PIDS, TrackRecord
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    schedule: str = "constant"
    warmup_iters: int = 0
    min_lr_ratio: float = 0.1
    batch_size: int = 32
    max_iters: int = 1000
    seed: int = 0
    lambda_space: float = 1.0
    lambda_time: float = 1.0
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    eval_every: int = 100
    checkpoint_every: int = 0
    bucket: int = 8
    freeze_embeddings: bool = False

    def __post_init__(self):
        if self.lambda_space < 0 or self.lambda_time < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0 or self.max_iters < 0:
            raise ConfigError("lr must be positive and max_iters non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    iteration: list[int] = field(default_factory=list)
    loss_space: list[float] = field(default_factory=list)
    loss_time: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall: list[float] = field(default_factory=list)
    eval_iteration: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def record(self, it, space, tim, total, lr, wall):
        if self.iteration and it <= self.iteration[-1]:
            raise ValueError("iterations must increase")
        self.iteration.append(int(it))
        self.loss_space.append(float(space))
        self.loss_time.append(float(tim))
        self.loss_total.append(float(total))
        self.lr.append(float(lr))
        self.wall.append(float(wall))

    def to_csv(self, path):
        acc = dict(zip(self.eval_iteration, self.accuracy))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss_space", "loss_time", "loss_total", "lr", "accuracy"])
            for i, it in enumerate(self.iteration):
                a = acc.get(it)
                w.writerow([it, repr(self.loss_space[i]), repr(self.loss_time[i]), repr(self.loss_total[i]),
                            repr(self.lr[i]), "" if a is None else repr(a)])
            for it in self.eval_iteration:
                if it not in set(self.iteration):
                    w.writerow([it, "", "", "", "", repr(acc[it])])


@dataclass
class LossBreakdown:
    total: torch.Tensor
    space: torch.Tensor
    time: torch.Tensor
    n_targets: int


def _targets(batch: Batch):
    mask = batch.loss_mask[:, :-1]
    return mask, batch.spatial[:, 1:], batch.time[:, 1:]


def generative_loss(out: ForwardOutput, batch: Batch, lambda_space: float = 1.0,
                    lambda_time: float = 1.0) -> LossBreakdown:
    """Weighted next-token cross-entropy of both heads.

    Logits at assembled position ``N_CONTEXT + j`` predict token ``j + 1``;
    context, padding and post-EOS positions are masked out.
    """
    mask, ts, tt = _targets(batch)
    if not bool(mask.any()):
        raise DatasetError("batch has no unmasked target positions")
    width = mask.shape[1]
    sl = out.spatial_logits[:, N_CONTEXT: N_CONTEXT + width]
    tl = out.time_logits[:, N_CONTEXT: N_CONTEXT + width]
    ce_s, _ = tc.masked_cross_entropy(sl, ts, mask)
    ce_t, _ = tc.masked_cross_entropy(tl, tt, mask)
    return LossBreakdown(lambda_space * ce_s + lambda_time * ce_t, ce_s, ce_t, int(mask.sum()))


def fast_generative_loss(model: DircTransformer, batch: Batch, lambda_space: float = 1.0,
                         lambda_time: float = 1.0) -> LossBreakdown:
    """Same value as :func:`generative_loss`, with the vocabulary heads applied only
    to unmasked positions."""
    mask, ts, tt = _targets(batch)
    if not bool(mask.any()):
        raise DatasetError("batch has no unmasked target positions")
    h = model.trunk(batch.spatial, batch.time, batch.momentum, batch.theta, batch.token_mask)
    width = mask.shape[1]
    sel = h[:, N_CONTEXT: N_CONTEXT + width][mask]
    sl, tl = model.heads(sel)
    ce_s, _ = tc.masked_cross_entropy(sl, ts[mask])
    ce_t, _ = tc.masked_cross_entropy(tl, tt[mask])
    return LossBreakdown(lambda_space * ce_s + lambda_time * ce_t, ce_s, ce_t, int(mask.sum()))


def classification_loss(model: DircTransformer, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    out = model.forward_classifier(batch.spatial, batch.time, batch.momentum, batch.theta, batch.token_mask)
    loss, _ = tc.masked_cross_entropy(out.class_scores, batch.labels)
    return loss, out.class_scores


def _lr_at(cfg: TrainConfig, it: int) -> float:
    if cfg.warmup_iters and it < cfg.warmup_iters:
        return cfg.lr * (it + 1) / cfg.warmup_iters
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(cfg.max_iters - cfg.warmup_iters, 1)
    frac = min(max(it - cfg.warmup_iters, 0) / span, 1.0)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def make_optimizer(model: DircTransformer, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.dim() >= 2 and "position" not in name:
            decay.append(p)
        else:
            no_decay.append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.99))


def _batch_stream(records, tokenizer: Tokenizer, cfg: TrainConfig):
    epoch = 0
    while True:
        batches = make_batches(records, tokenizer, cfg.batch_size, shuffle=True,
                               seed=cfg.seed * 1000003 + epoch, bucket=cfg.bucket, truncate=True)
        yield from batches
        epoch += 1


def _dump_batch(batch: Batch, out_dir) -> str | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / "nonfinite_batch.npz"
    np.savez(path, spatial=batch.spatial.numpy(), time=batch.time.numpy(), momentum=batch.momentum.numpy(),
             theta=batch.theta.numpy(), token_mask=batch.token_mask.numpy(), index=batch.index)
    return str(path)


def train_generative(records: Sequence[TrackRecord], model: DircTransformer, cfg: TrainConfig,
                     tokenizer: Tokenizer | None = None, out_dir=None,
                     callback=None) -> tuple[DircTransformer, TrainLog]:
    """Fit one class-specific generator on ``records``.

    Reproducible from ``cfg.seed`` (data order and dropout); parameter init
    is the caller's responsibility (see :meth:`DircTransformer.create`).
    """
    if model.mode != GENERATIVE:
        from .errors import ModeError
        raise ModeError("train_generative needs a generative model")
    if not records:
        raise DatasetError("empty training set")
    pids = {r.pid for r in records}
    if len(pids) != 1:
        raise ConfigError(f"generative training takes a single particle class per run, got {sorted(pids)}")
    tokenizer = tokenizer or Tokenizer()
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    tlog = TrainLog()
    stream = _batch_stream(records, tokenizer, cfg)
    start = time.perf_counter()
    model.train()
    for it in range(1, cfg.max_iters + 1):
        batch = next(stream)
        lr = _lr_at(cfg, it - 1)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = fast_generative_loss(model, batch, cfg.lambda_space, cfg.lambda_time)
        if not torch.isfinite(loss.total):
            dump = _dump_batch(batch, out_dir)
            raise NonFiniteLossError(f"non-finite loss at iteration {it} (batch dumped to {dump})", dump)
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        if cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        opt.step()
        tlog.record(it, loss.space.item(), loss.time.item(), loss.total.item(), lr, time.perf_counter() - start)
        if cfg.eval_every and it % cfg.eval_every == 0:
            log.info("iter %d loss %.4f (space %.4f, time %.4f)", it, tlog.loss_total[-1],
                     tlog.loss_space[-1], tlog.loss_time[-1])
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(out_dir) / f"ckpt_{it:07d}.ckpt", extra={"iteration": it})
        if callback is not None:
            callback(it, model, tlog)
    model.eval()
    return model, tlog


@torch.no_grad()
def predict_scores(model: DircTransformer, records: Sequence[TrackRecord], tokenizer: Tokenizer | None = None,
                   batch_size: int = 256) -> np.ndarray:
    """Class probabilities, shape (n, n_classes), in input order."""
    tokenizer = tokenizer or Tokenizer()
    was_training = model.training
    model.eval()
    out = np.zeros((len(records), model.cfg.n_classes))
    for batch in make_batches(records, tokenizer, batch_size, truncate=True):
        scores = model.forward_classifier(batch.spatial, batch.time, batch.momentum, batch.theta,
                                          batch.token_mask).class_scores
        out[batch.index] = tc.softmax_lastdim(scores.double()).numpy()
    model.train(was_training)
    return out


def accuracy(model: DircTransformer, records: Sequence[TrackRecord], tokenizer: Tokenizer | None = None) -> float:
    probs = predict_scores(model, records, tokenizer)
    labels = np.array([r.label for r in records])
    return float(np.mean(probs.argmax(axis=1) == labels))


def train_classifier(model: DircTransformer, records: Sequence[TrackRecord], cfg: TrainConfig,
                     val_records: Sequence[TrackRecord] | None = None, tokenizer: Tokenizer | None = None,
                     out_dir=None) -> tuple[DircTransformer, TrainLog]:
    """Cross-entropy training of a classification-mode model.

    Accuracy on ``val_records`` is logged every ``cfg.eval_every`` iterations.
    """
    if model.mode != CLASSIFIER:
        from .errors import ModeError
        raise ModeError("train_classifier needs a classifier model")
    classes = {r.pid for r in records}
    if len(classes) < 2:
        raise DatasetError(f"classifier training needs both classes, got {sorted(classes)}")
    tokenizer = tokenizer or Tokenizer()
    torch.manual_seed(cfg.seed)
    if cfg.freeze_embeddings:
        for name, p in model.named_parameters():
            if name.endswith(("embedding", "position")):
                p.requires_grad_(False)
    opt = make_optimizer(model, cfg)
    tlog = TrainLog()
    stream = _batch_stream(records, tokenizer, cfg)
    start = time.perf_counter()
    model.train()
    for it in range(1, cfg.max_iters + 1):
        batch = next(stream)
        lr = _lr_at(cfg, it - 1)
        for g in opt.param_groups:
            g["lr"] = lr
        loss, _ = classification_loss(model, batch)
        if not torch.isfinite(loss):
            dump = _dump_batch(batch, out_dir)
            raise NonFiniteLossError(f"non-finite loss at iteration {it} (batch dumped to {dump})", dump)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], cfg.clip_norm)
        opt.step()
        tlog.record(it, 0.0, 0.0, loss.item(), lr, time.perf_counter() - start)
        if val_records is not None and cfg.eval_every and it % cfg.eval_every == 0:
            tlog.eval_iteration.append(it)
            tlog.accuracy.append(accuracy(model, val_records, tokenizer))
            model.train()
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(out_dir) / f"ckpt_{it:07d}.ckpt", extra={"iteration": it})
    model.eval()
    return model, tlog


def finetune_classifier(backbone_ckpt, records: Sequence[TrackRecord], cfg: TrainConfig,
                        model_cfg: ModelConfig | None = None, val_records=None,
                        tokenizer: Tokenizer | None = None, out_dir=None) -> tuple[DircTransformer, TrainLog]:
    """Load a generative backbone, swap the generation heads for a class head, train.

    The checkpoint file is only read.
    """
    model = classifier_from_backbone(backbone_ckpt, model_cfg, seed=cfg.seed)
    return train_classifier(model, records, cfg, val_records, tokenizer, out_dir)


def train_classifier_scratch(records: Sequence[TrackRecord], cfg: TrainConfig, model_cfg: ModelConfig,
                             val_records=None, tokenizer: Tokenizer | None = None,
                             out_dir=None) -> tuple[DircTransformer, TrainLog]:
    model = DircTransformer.create(model_cfg, CLASSIFIER, seed=cfg.seed)
    return train_classifier(model, records, cfg, val_records, tokenizer, out_dir)
