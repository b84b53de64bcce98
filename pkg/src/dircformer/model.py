"""Split-vocabulary transformer: time queries space.

Layout of one forward pass (B tracks, T tokens per stream, L = T + 2)::

    spatial tokens --embed--+                      +-- spatial head (generation)
                            |--> [p, theta] ++ ... |
    time tokens ----embed---+   (+ positions)      +-- time head (generation)
                                 |                 +-- class head on CLS (classification)
       time (Q) x spatial (K, V) causal cross block
                                 |
                     N causal self-attention blocks

Attention uses l2-normalised queries and keys with a learnable per-head
scale, pre-norm on sub-layer inputs and post-norm after each residual add.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensor_core as tc
from .errors import CheckpointError, ConfigError, IncompatibleCheckpointError, InvalidTokenError, ModeError
from .records import DEFAULT_PHASE_SPACE
from .tokenizer import MAX_HITS, Tokenizer

GENERATIVE = "generative"
CLASSIFIER = "classifier"
N_CONTEXT = 2


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 8
    n_mhsa_blocks: int = 2
    ffn_multiplier: int = 4
    spatial_vocab: int = 6144 + 4
    time_vocab: int = 5920 + 4
    max_positions: int = MAX_HITS + 6
    qk_scale_init: float | None = None
    dropout: float = 0.0
    n_classes: int = 2
    momentum_range: tuple[float, float] = (DEFAULT_PHASE_SPACE.p_min, DEFAULT_PHASE_SPACE.p_max)
    theta_range: tuple[float, float] = (DEFAULT_PHASE_SPACE.theta_min, DEFAULT_PHASE_SPACE.theta_max)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_positions < MAX_HITS + 2 + N_CONTEXT:
            raise ConfigError(f"max_positions must cover {MAX_HITS} hits + SOS/EOS + context")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        object.__setattr__(self, "momentum_range", tuple(float(v) for v in self.momentum_range))
        object.__setattr__(self, "theta_range", tuple(float(v) for v in self.theta_range))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scale_init(self) -> float:
        return math.sqrt(self.d_head) if self.qk_scale_init is None else float(self.qk_scale_init)

    @classmethod
    def for_tokenizer(cls, tokenizer: Tokenizer, **kw) -> "ModelConfig":
        return cls(spatial_vocab=tokenizer.spatial_vocab, time_vocab=tokenizer.time_vocab, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["momentum_range"] = list(self.momentum_range)
        d["theta_range"] = list(self.theta_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    spatial_logits: torch.Tensor | None = None
    time_logits: torch.Tensor | None = None
    class_scores: torch.Tensor | None = None
    hidden: torch.Tensor | None = None


class Norm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return tc.layer_norm(x, self.gain, self.bias)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return tc.linear(x, self.weight, self.bias)


class QKNormAttention(nn.Module):
    """Multi-head attention on l2-normalised Q/K rows with a learnable scale per head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads, self.d_head = cfg.n_heads, cfg.d_head
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.out = Linear(d, d)
        self.scale = nn.Parameter(torch.full((cfg.n_heads,), cfg.scale_init))

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.d_head).transpose(1, 2)

    def weights(self, xq, xkv, allowed):
        """Post-softmax attention maps, shape (B, heads, Lq, Lk)."""
        q = tc.l2_normalize_rows(self._split(self.q(xq)))
        k = tc.l2_normalize_rows(self._split(self.k(xkv)))
        logits = tc.matmul(q, k.transpose(-1, -2)) * self.scale.view(1, -1, 1, 1)
        return tc.softmax_lastdim(logits, allowed)

    def forward(self, xq, xkv, allowed):
        w = self.weights(xq, xkv, allowed)
        v = self._split(self.v(xkv))
        y = tc.matmul(w, v).transpose(1, 2).reshape(xq.shape)
        return self.out(y)


class Block(nn.Module):
    """Attention + GeLU feed-forward with pre-norm inputs and post-norm residuals.

    ``cross=True`` takes queries from ``x`` and keys/values from ``kv``.
    """

    def __init__(self, cfg: ModelConfig, cross: bool = False):
        super().__init__()
        d = cfg.d_model
        self.cross = cross
        self.dropout = cfg.dropout
        self.norm_q = Norm(d)
        self.norm_kv = Norm(d) if cross else None
        self.attn = QKNormAttention(cfg)
        self.post_attn = Norm(d)
        self.norm_ffn = Norm(d)
        self.ffn_in = Linear(d, cfg.ffn_multiplier * d)
        self.ffn_out = Linear(cfg.ffn_multiplier * d, d)
        self.post_ffn = Norm(d)

    def attention_inputs(self, x, kv=None):
        hq = self.norm_q(x)
        hkv = self.norm_kv(kv) if self.cross else hq
        return hq, hkv

    def forward(self, x, allowed, kv=None):
        hq, hkv = self.attention_inputs(x, kv)
        a = tc.dropout(self.attn(hq, hkv, allowed), self.dropout, self.training)
        x = self.post_attn(x + a)
        f = self.ffn_out(tc.gelu(self.ffn_in(self.norm_ffn(x))))
        return self.post_ffn(x + tc.dropout(f, self.dropout, self.training))


class DircTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, mode: str = GENERATIVE):
        super().__init__()
        if mode not in (GENERATIVE, CLASSIFIER):
            raise ConfigError(f"unknown model mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        d = cfg.d_model
        self.spatial_embedding = nn.Parameter(torch.empty(cfg.spatial_vocab, d))
        self.time_embedding = nn.Parameter(torch.empty(cfg.time_vocab, d))
        self.spatial_position = nn.Parameter(torch.empty(cfg.max_positions, d))
        self.time_position = nn.Parameter(torch.empty(cfg.max_positions, d))
        self.momentum_proj = Linear(1, d)
        self.theta_proj = Linear(1, d)
        self.cmhca = Block(cfg, cross=True)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_mhsa_blocks))
        if mode == GENERATIVE:
            self.spatial_head = Linear(d, cfg.spatial_vocab)
            self.time_head = Linear(d, cfg.time_vocab)
        else:
            self.class_head = Linear(d, cfg.n_classes)

    # -- construction --------------------------------------------------------

    def reset_parameters(self, seed: int = 0, std: float = 0.02):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                elif name.endswith("scale"):
                    p.fill_(self.cfg.scale_init)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
        return self

    @classmethod
    def create(cls, cfg: ModelConfig, mode: str = GENERATIVE, seed: int = 0,
               dtype: torch.dtype = torch.float32) -> "DircTransformer":
        return cls(cfg, mode).to(dtype).reset_parameters(seed)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def dtype(self) -> torch.dtype:
        return self.spatial_embedding.dtype

    # -- pieces ----------------------------------------------------------------

    def _normalise(self, value, lo_hi):
        lo, hi = lo_hi
        v = torch.as_tensor(value, dtype=self.dtype).reshape(-1, 1)
        return 2.0 * (v - lo) / (hi - lo) - 1.0

    def kinematic_context(self, momentum, theta) -> torch.Tensor:
        """(B, 2, d): momentum and theta projections, shared by both streams."""
        pm = self.momentum_proj(self._normalise(momentum, self.cfg.momentum_range))
        th = self.theta_proj(self._normalise(theta, self.cfg.theta_range))
        return torch.stack([pm, th], dim=1)

    def _check_ids(self, ids, vocab, stream):
        if ids.numel() == 0:
            return
        bad = (ids < 0) | (ids >= vocab)
        if bad.any():
            b, pos = bad.nonzero()[0].tolist()
            raise InvalidTokenError(
                f"{stream} token {int(ids[b, pos])} out of vocabulary ({vocab}) at batch {b}, position {pos}",
                value=int(ids[b, pos]), position=pos,
            )

    def embed_streams(self, spatial_tokens, time_tokens, momentum, theta):
        """Embed both streams with the kinematic context prepended.

        Returns (spatial_emb, time_emb), each (B, T + 2, d).
        """
        spatial_tokens = torch.as_tensor(spatial_tokens)
        time_tokens = torch.as_tensor(time_tokens)
        if spatial_tokens.dim() == 1:
            spatial_tokens, time_tokens = spatial_tokens[None], time_tokens[None]
        if spatial_tokens.shape != time_tokens.shape:
            raise ConfigError(f"stream shapes differ: {tuple(spatial_tokens.shape)} vs {tuple(time_tokens.shape)}")
        self._check_ids(spatial_tokens, self.cfg.spatial_vocab, "spatial")
        self._check_ids(time_tokens, self.cfg.time_vocab, "time")
        length = spatial_tokens.shape[1] + N_CONTEXT
        if length > self.cfg.max_positions:
            raise ConfigError(f"assembled length {length} exceeds max_positions {self.cfg.max_positions}")
        ctx = self.kinematic_context(momentum, theta)
        s = torch.cat([ctx, tc.embedding_lookup(self.spatial_embedding, spatial_tokens)], dim=1)
        t = torch.cat([ctx, tc.embedding_lookup(self.time_embedding, time_tokens)], dim=1)
        return s + self.spatial_position[:length], t + self.time_position[:length]

    @staticmethod
    def attention_mask(token_mask: torch.Tensor | None, batch: int, length: int, causal: bool) -> torch.Tensor:
        """Boolean (B|1, 1, L, L) mask, True where query i may read key j."""
        allowed = torch.ones(length, length, dtype=torch.bool)
        if causal:
            allowed = torch.tril(allowed)
        allowed = allowed.view(1, 1, length, length)
        if token_mask is not None:
            ctx = torch.ones(token_mask.shape[0], N_CONTEXT, dtype=torch.bool)
            keys = torch.cat([ctx, token_mask.bool()], dim=1).view(-1, 1, 1, length)
            allowed = allowed & keys
        return allowed

    def trunk(self, spatial_tokens, time_tokens, momentum, theta, token_mask=None,
              causal: bool = True) -> torch.Tensor:
        s, t = self.embed_streams(spatial_tokens, time_tokens, momentum, theta)
        allowed = self.attention_mask(token_mask, s.shape[0], s.shape[1], causal)
        x = self.cmhca(t, allowed, kv=s)
        for block in self.blocks:
            x = block(x, allowed)
        return x

    # -- heads -----------------------------------------------------------------

    def _require(self, mode):
        if self.mode != mode:
            raise ModeError(f"operation needs a {mode} model, this one is {self.mode}")

    def heads(self, hidden) -> tuple[torch.Tensor, torch.Tensor]:
        self._require(GENERATIVE)
        return self.spatial_head(hidden), self.time_head(hidden)

    def forward_generative(self, spatial_tokens, time_tokens, momentum, theta, token_mask=None) -> ForwardOutput:
        """Next-token logits at every assembled position (context slots included)."""
        self._require(GENERATIVE)
        h = self.trunk(spatial_tokens, time_tokens, momentum, theta, token_mask, causal=True)
        s, t = self.heads(h)
        return ForwardOutput(spatial_logits=s, time_logits=t, hidden=h)

    def insert_cls(self, spatial_tokens, time_tokens, token_mask=None):
        spatial_tokens = torch.as_tensor(spatial_tokens)
        time_tokens = torch.as_tensor(time_tokens)
        if spatial_tokens.dim() == 1:
            spatial_tokens, time_tokens = spatial_tokens[None], time_tokens[None]
        b = spatial_tokens.shape[0]
        cls_s = torch.full((b, 1), self.cfg.spatial_vocab - 1, dtype=spatial_tokens.dtype)
        cls_t = torch.full((b, 1), self.cfg.time_vocab - 1, dtype=time_tokens.dtype)
        spatial_tokens = torch.cat([cls_s, spatial_tokens], dim=1)
        time_tokens = torch.cat([cls_t, time_tokens], dim=1)
        if token_mask is not None:
            token_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), token_mask.bool()], dim=1)
        return spatial_tokens, time_tokens, token_mask

    def forward_classifier(self, spatial_tokens, time_tokens, momentum, theta, token_mask=None) -> ForwardOutput:
        """Class scores read from the CLS slot placed right after the context.

        Classification runs without the causal mask so CLS sees the whole track.
        """
        self._require(CLASSIFIER)
        s, t, m = self.insert_cls(spatial_tokens, time_tokens, token_mask)
        h = self.trunk(s, t, momentum, theta, m, causal=False)
        return ForwardOutput(class_scores=self.class_head(h[:, N_CONTEXT]), hidden=h)

    def forward(self, batch):
        args = (batch.spatial, batch.time, batch.momentum, batch.theta, batch.token_mask)
        if self.mode == GENERATIVE:
            return self.forward_generative(*args)
        return self.forward_classifier(*args)


# --- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"DIRCFORMER-CKPT\n"
CKPT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_DTYPE_NAMES = {"<f4": torch.float32, "<f8": torch.float64}


def checkpoint_bytes(model: DircTransformer, extra: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        t = tensor.detach().cpu().contiguous()
        code = _DTYPES.get(t.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": CKPT_VERSION,
        "mode": model.mode,
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(model: DircTransformer, path, extra: dict | None = None) -> Path:
    path = Path(path)
    data = checkpoint_bytes(model, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Header dict and named tensors from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        from .errors import MissingFileError
        raise MissingFileError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", data, pos)
    except struct.error:
        raise CheckpointError("checkpoint header truncated") from None
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {CKPT_VERSION}")
    pos += 12
    try:
        header = json.loads(data[pos: pos + hlen].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from None
    body = memoryview(data)[pos + hlen:]
    tensors = {}
    for e in entries:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise CheckpointError(f"tensor {e['name']} truncated")
        arr = np.frombuffer(body[e["offset"]: end], dtype=e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header, tensors


def load_checkpoint(path) -> tuple[DircTransformer, dict]:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = DircTransformer(cfg, header["mode"])
    dtypes = {t.dtype for t in tensors.values()}
    if len(dtypes) == 1:
        model = model.to(dtypes.pop())
    missing = set(model.state_dict()) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.load_state_dict(tensors, strict=True)
    return model, header.get("extra", {})


BACKBONE_PREFIXES = ("spatial_embedding", "time_embedding", "spatial_position", "time_position",
                     "momentum_proj.", "theta_proj.", "cmhca.", "blocks.")


def compatible_fields(a: ModelConfig, b: ModelConfig) -> list[str]:
    """Config fields that must agree for backbone weights to transfer."""
    skip = {"dropout", "n_classes"}
    return [f.name for f in fields(ModelConfig)
            if f.name not in skip and getattr(a, f.name) != getattr(b, f.name)]


def classifier_from_backbone(path, cfg: ModelConfig | None = None, seed: int = 0) -> DircTransformer:
    """Classification model whose backbone is copied from a generative checkpoint.

    The generation heads are dropped, the CLS rows of both embedding tables
    and the class head are freshly initialised.
    """
    header, tensors = read_checkpoint(path)
    if header["mode"] != GENERATIVE:
        raise ModeError("fine-tuning needs a generative checkpoint")
    src_cfg = ModelConfig.from_dict(header["config"])
    cfg = cfg or src_cfg
    mismatch = compatible_fields(src_cfg, cfg)
    if mismatch:
        raise IncompatibleCheckpointError(mismatch)
    dtype = next(iter(tensors.values())).dtype
    model = DircTransformer.create(cfg, CLASSIFIER, seed=seed, dtype=dtype)
    fresh = {k: v.clone() for k, v in model.state_dict().items()}
    state = dict(fresh)
    for name, t in tensors.items():
        if name.startswith(BACKBONE_PREFIXES):
            state[name] = t.clone()
    # CLS rows start fresh: the generative run never trained them
    for name, vocab in (("spatial_embedding", cfg.spatial_vocab), ("time_embedding", cfg.time_vocab)):
        state[name][vocab - 1] = fresh[name][vocab - 1]
    model.load_state_dict(state, strict=True)
    return model
