"""Command-line front end: ``dircformer <subcommand> [flags]``.

Settings resolve in three layers: built-in defaults, then an optional YAML
config file (``--config``), then explicit flags.  The resolved settings are
echoed into a ``manifest.json`` next to every run's outputs together with
SHA-256 hashes of inputs and outputs, so two runs with the same command and
seed can be compared by hash.  Exit codes are listed in docs/errors.md.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
import types
import typing
from pathlib import Path

import jsonschema
import numpy as np
import torch
import yaml

from . import __version__
from .errors import ConfigError, DircError, EvaluationError, MissingFileError
from .records import DEFAULT_PHASE_SPACE, PhaseSpace, pid_label
from .tokenizer import PixelGrid, TimeBinning, Tokenizer

log = logging.getLogger("dircformer")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SELFTEST_FAILED = 9
EXIT_INTERRUPTED = 130

SUBCOMMANDS = ("simulate-toy", "train", "finetune", "generate", "classify", "evaluate", "selftest")
EVAL_MODES = ("ratios", "yield", "kde", "classifier", "occupancy")


# --- config -------------------------------------------------------------------

_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _field_schema(tp) -> dict:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        inner = _field_schema(args[0])
        return {"anyOf": [inner, {"type": "null"}]}
    if origin is tuple:
        return {"type": "array", "items": {"type": "number"}}
    if dataclasses.is_dataclass(tp):
        return _dataclass_schema(tp)
    return {"type": _JSON_TYPES.get(tp, "string")}


def _dataclass_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {"type": "object", "additionalProperties": False,
            "properties": {f.name: _field_schema(hints[f.name]) for f in dataclasses.fields(cls)}}


def _default_config() -> dict:
    from .generation import GenerationPolicy
    from .model import ModelConfig
    from .toy import ToyDetectorConfig
    from .training import TrainConfig

    model = ModelConfig().to_dict()
    for key in ("spatial_vocab", "time_vocab"):
        model.pop(key)  # always taken from the tokenizer
    return {
        "seed": 0,
        "threads": 1,
        "phase_space": DEFAULT_PHASE_SPACE.as_list(),
        "toy": ToyDetectorConfig().to_dict(),
        "model": model,
        "train": TrainConfig().to_dict(),
        "generation": {**dataclasses.asdict(GenerationPolicy()), "batch_size": 256},
        "evaluation": {"theta_bin_width": 5.0, "pixels_per_bin": 4, "time_bin_ns": 0.5, "bandwidths": None,
                       "yield_term": False, "method": "moments"},
    }


def config_schema() -> dict:
    from .generation import GenerationPolicy
    from .model import ModelConfig
    from .toy import ToyDetectorConfig
    from .training import TrainConfig

    model = _dataclass_schema(ModelConfig)
    for key in ("spatial_vocab", "time_vocab"):
        model["properties"].pop(key)
    generation = _dataclass_schema(GenerationPolicy)
    generation["properties"]["batch_size"] = {"type": "integer", "minimum": 1}
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "seed": {"type": "integer", "minimum": 0},
            "threads": {"type": "integer", "minimum": 1},
            "phase_space": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
            "toy": _dataclass_schema(ToyDetectorConfig),
            "model": model,
            "train": _dataclass_schema(TrainConfig),
            "generation": generation,
            "evaluation": {
                "type": "object", "additionalProperties": False,
                "properties": {
                    "theta_bin_width": {"type": "number", "exclusiveMinimum": 0},
                    "pixels_per_bin": {"type": "integer", "minimum": 1},
                    "time_bin_ns": {"type": "number", "exclusiveMinimum": 0},
                    "bandwidths": {"anyOf": [{"type": "null"},
                                             {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                              "minItems": 3, "maxItems": 3}]},
                    "yield_term": {"type": "boolean"},
                    "method": {"enum": ["moments", "fit"]},
                },
            },
        },
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    validate_config(data, str(path))
    return data


def validate_config(data, source: str = "config") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        jsonschema.validate(data, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{source}: {where}: {exc.message}") from None


# flag dest -> (section, key); section None means top level
_FLAG_KEYS = {
    "seed": (None, "seed"),
    "threads": (None, "threads"),
    "lr": ("train", "lr"),
    "schedule": ("train", "schedule"),
    "batch_size": ("train", "batch_size"),
    "iters": ("train", "max_iters"),
    "warmup_iters": ("train", "warmup_iters"),
    "eval_every": ("train", "eval_every"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "freeze_embeddings": ("train", "freeze_embeddings"),
    "d_model": ("model", "d_model"),
    "n_heads": ("model", "n_heads"),
    "n_blocks": ("model", "n_mhsa_blocks"),
    "nucleus_p": ("generation", "nucleus_p"),
    "temperature": ("generation", "temperature"),
    "max_hits": ("generation", "max_hits"),
    "eos_policy": ("generation", "eos_policy"),
    "gen_batch_size": ("generation", "batch_size"),
    "theta_bin_width": ("evaluation", "theta_bin_width"),
    "pixels_per_bin": ("evaluation", "pixels_per_bin"),
    "time_bin_ns": ("evaluation", "time_bin_ns"),
    "bandwidths": ("evaluation", "bandwidths"),
    "yield_term": ("evaluation", "yield_term"),
    "method": ("evaluation", "method"),
    "no_fold": ("toy", "fold"),
}


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    cfg = _default_config()
    if getattr(args, "config", None):
        cfg = _merge(cfg, load_config_file(args.config))
    for dest, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "no_fold":
            value = not value
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value
    if getattr(args, "bounds", None):
        cfg["phase_space"] = list(args.bounds)
    validate_config(cfg, "resolved configuration")
    _check_values(cfg)
    return cfg


def _check_values(cfg: dict) -> None:
    """Build every section's dataclass once so out-of-range values fail at startup."""
    from .generation import GenerationPolicy
    from .toy import ToyDetectorConfig

    toy = ToyDetectorConfig.from_dict(cfg["toy"])
    PhaseSpace.from_list(cfg["phase_space"])
    _train_config(cfg)
    _model_config(cfg, Tokenizer(toy.grid, toy.binning))
    GenerationPolicy(**{k: v for k, v in cfg["generation"].items() if k != "batch_size"})


# --- manifest and outputs -----------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: dict = dataclasses.field(default_factory=dict)
    argv: list = dataclasses.field(default_factory=list)
    version: str = __version__
    platform: str = dataclasses.field(default_factory=platform.platform)
    torch_version: str = torch.__version__
    wall_clock_s: float = 0.0
    exit_code: int = 0

    def write(self, path) -> Path:
        path = Path(path)
        with staged(path) as tmp:
            tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


@contextlib.contextmanager
def staged(path):
    """Write to a temporary sibling and move it into place only on success."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.partial")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"input file not found: {p}")
    return p


def _hash_inputs(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths}


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _set_threads(n: int) -> None:
    torch.set_num_threads(max(int(n), 1))


def _tokenizer(cfg: dict) -> Tokenizer:
    toy = cfg["toy"]
    return Tokenizer(PixelGrid(**toy["grid"]), TimeBinning(**toy["binning"]))


def _read_tracks(paths):
    from .data import read_dataset

    out = []
    for p in paths:
        _, recs = read_dataset(_require_file(p))
        out.extend(recs)
    return out


# --- subcommands --------------------------------------------------------------

def cmd_simulate_toy(args, cfg) -> RunManifest:
    from .data import write_dataset
    from .toy import ToyDetectorConfig, simulate_dataset, simulate_tracks

    pid_label(args.pid)
    toy = ToyDetectorConfig.from_dict(cfg["toy"])
    bounds = PhaseSpace.from_list(cfg["phase_space"])
    if (args.momentum is None) != (args.theta is None):
        raise ConfigError("--momentum and --theta must be given together")
    if args.momentum is not None:
        kin = np.tile([args.momentum, args.theta], (args.n_tracks, 1))
        recs = simulate_tracks(args.pid, kin, toy, seed=cfg["seed"])
    else:
        recs = simulate_dataset(args.pid, args.n_tracks, bounds, toy, seed=cfg["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with staged(out) as tmp:
        write_dataset(tmp, recs, pid=args.pid, phase_space=bounds, grid=toy.grid, binning=toy.binning,
                      extra={"source": "toy", "seed": cfg["seed"], "toy": toy.to_dict()})
    log.info("wrote %d %s tracks to %s", len(recs), args.pid, out)
    return RunManifest("simulate-toy", cfg, cfg["seed"], outputs={out.name: sha256_file(out)})


def _train_config(cfg):
    from .training import TrainConfig

    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def _model_config(cfg, tokenizer):
    from .model import ModelConfig

    return ModelConfig.from_dict({**cfg["model"], "spatial_vocab": tokenizer.spatial_vocab,
                                  "time_vocab": tokenizer.time_vocab})


def _finish_training(model, tlog, out_dir: Path, extra: dict) -> dict:
    from .model import save_checkpoint

    ckpt = save_checkpoint(model, out_dir / "model.ckpt", extra=extra)
    with staged(out_dir / "train_log.csv") as tmp:
        tlog.to_csv(tmp)
    outputs = {p.name: sha256_file(p) for p in sorted(out_dir.glob("*.ckpt"))}
    outputs["train_log.csv"] = sha256_file(out_dir / "train_log.csv")
    return outputs


def cmd_train(args, cfg) -> RunManifest:
    from .model import CLASSIFIER, GENERATIVE, DircTransformer
    from .training import train_classifier, train_generative

    inputs = [_require_file(p) for p in args.data + (args.val_data or [])]
    tokenizer = _tokenizer(cfg)
    tcfg, mcfg = _train_config(cfg), _model_config(cfg, tokenizer)
    records = _read_tracks(args.data)
    val = _read_tracks(args.val_data) if args.val_data else None
    out_dir = _out_dir(args.out_dir)
    if args.mode == "generative":
        model = DircTransformer.create(mcfg, GENERATIVE, seed=cfg["seed"])
        model, tlog = train_generative(records, model, tcfg, tokenizer, out_dir)
        extra = {"pid": records[0].pid, "iteration": tcfg.max_iters, "train": tcfg.to_dict()}
    else:
        model = DircTransformer.create(mcfg, CLASSIFIER, seed=cfg["seed"])
        model, tlog = train_classifier(model, records, tcfg, val, tokenizer, out_dir)
        extra = {"iteration": tcfg.max_iters, "train": tcfg.to_dict(), "init": "scratch"}
    outputs = _finish_training(model, tlog, out_dir, extra)
    return RunManifest("train", cfg, cfg["seed"], inputs=_hash_inputs(inputs), outputs=outputs)


def cmd_finetune(args, cfg) -> RunManifest:
    from .model import ModelConfig, read_checkpoint
    from .training import finetune_classifier

    backbone = _require_file(args.backbone)
    inputs = [backbone] + [_require_file(p) for p in args.data + (args.val_data or [])]
    tokenizer = _tokenizer(cfg)
    tcfg = _train_config(cfg)
    header, _ = read_checkpoint(backbone)
    mcfg = ModelConfig.from_dict(header["config"])
    records = _read_tracks(args.data)
    val = _read_tracks(args.val_data) if args.val_data else None
    out_dir = _out_dir(args.out_dir)
    model, tlog = finetune_classifier(backbone, records, tcfg, mcfg, val, tokenizer, out_dir)
    extra = {"iteration": tcfg.max_iters, "train": tcfg.to_dict(), "init": "finetune",
             "backbone_sha256": sha256_file(backbone)}
    outputs = _finish_training(model, tlog, out_dir, extra)
    return RunManifest("finetune", cfg, cfg["seed"], inputs=_hash_inputs(inputs), outputs=outputs)


def cmd_generate(args, cfg) -> RunManifest:
    from .data import write_dataset
    from .generation import GenerationPolicy, GenerationStats, generate_many
    from .model import load_checkpoint

    ckpt = _require_file(args.ckpt)
    model, extra = load_checkpoint(ckpt)
    pid = args.pid or extra.get("pid", "pion")
    pid_label(pid)
    gen_cfg = dict(cfg["generation"])
    batch_size = gen_cfg.pop("batch_size")
    policy = GenerationPolicy(**{**gen_cfg, "seed": cfg["seed"]})
    tokenizer = _tokenizer(cfg)
    stats = GenerationStats()
    kins = [(args.momentum, args.theta)] * args.n_tracks
    recs = generate_many(kins, model, policy, tokenizer, batch_size=batch_size, pid=pid, stats=stats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with staged(out) as tmp:
        write_dataset(tmp, recs, pid=pid, grid=tokenizer.grid, binning=tokenizer.binning,
                      phase_space=PhaseSpace.from_list(cfg["phase_space"]),
                      extra={"source": "generated", "checkpoint_sha256": sha256_file(ckpt),
                             "policy": dataclasses.asdict(policy), "truncated": stats.truncated,
                             "async_eos": stats.async_eos})
    log.info("generated %d tracks (%d truncated, %d with unequal EOS steps)", len(recs), stats.truncated,
             stats.async_eos)
    return RunManifest("generate", cfg, cfg["seed"], inputs=_hash_inputs([ckpt]),
                       outputs={out.name: sha256_file(out)})


def _theta_edges(cfg, records) -> np.ndarray:
    w = cfg["evaluation"]["theta_bin_width"]
    lo = np.floor(min(r.theta for r in records) / w) * w
    hi = (np.floor(max(r.theta for r in records) / w) + 1) * w
    return np.arange(lo, hi + 0.5 * w, w)


def cmd_classify(args, cfg) -> RunManifest:
    from .evaluation.metrics import score_metrics
    from .model import load_checkpoint
    from .training import predict_scores

    ckpt = _require_file(args.ckpt)
    inputs = [ckpt] + [_require_file(p) for p in args.data]
    model, _ = load_checkpoint(ckpt)
    records = _read_tracks(args.data)
    probs = predict_scores(model, records, _tokenizer(cfg))
    out_dir = _out_dir(args.out_dir)
    with staged(out_dir / "scores.csv") as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "true_pid", "momentum", "theta", "n_hits", "prob_pion", "prob_kaon"])
        for i, (r, pr) in enumerate(zip(records, probs)):
            w.writerow([i, r.pid, r.momentum, r.theta, r.n_hits, repr(float(pr[0])), repr(float(pr[1]))])
    outputs = {"scores.csv": sha256_file(out_dir / "scores.csv")}
    labels = np.array([r.label for r in records])
    if np.unique(labels).size == 2:
        m = score_metrics(probs, labels, np.array([r.theta for r in records]), _theta_edges(cfg, records))
        summary = {"accuracy": m.accuracy, "roc_auc": m.roc_auc, "n": m.n, "mean_separation": m.mean_separation}
        with staged(out_dir / "metrics.json") as tmp:
            tmp.write_text(_dump_summary(summary))
        outputs["metrics.json"] = sha256_file(out_dir / "metrics.json")
        print(json.dumps(_json_safe(summary), sort_keys=True))
    return RunManifest("classify", cfg, cfg["seed"], inputs=_hash_inputs(inputs), outputs=outputs)


def _json_safe(value):
    """NaN/inf become null so summaries stay valid JSON."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def _dump_summary(summary: dict) -> str:
    return json.dumps(_json_safe(summary), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_csv(path: Path, header, rows) -> str:
    with staged(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return sha256_file(path)


def cmd_evaluate(args, cfg) -> RunManifest:
    from .evaluation import kde as kde_mod
    from .evaluation import metrics

    ev = cfg["evaluation"]
    gen_paths = [_require_file(p) for p in args.generated or []]
    ref_paths = [_require_file(p) for p in args.reference or []]
    ckpt = _require_file(args.ckpt) if args.ckpt else None
    inputs = gen_paths + ref_paths + ([ckpt] if ckpt else [])
    if not gen_paths:
        raise ConfigError("evaluate needs at least one --generated dataset")
    if args.mode in ("ratios", "yield", "occupancy", "kde") and not ref_paths:
        raise ConfigError(f"evaluate --mode {args.mode} needs --reference")
    tokenizer = _tokenizer(cfg)
    grid, binning = tokenizer.grid, tokenizer.binning
    out_dir = _out_dir(args.out_dir)
    outputs, summary = {}, {"mode": args.mode}
    generated = _read_tracks(gen_paths)
    if not generated:
        raise EvaluationError("generated dataset is empty")

    if args.mode == "ratios":
        g = metrics.build_marginals(generated, grid, binning, "generated", ev["pixels_per_bin"], ev["time_bin_ns"])
        r = metrics.build_marginals(_read_tracks(ref_paths), grid, binning, "oracle", ev["pixels_per_bin"],
                                    ev["time_bin_ns"])
        rows = []
        for axis in metrics.AXES:
            res = metrics.ratio(g, r, axis)
            hg, hr = g.axis(axis), r.axis(axis)
            for i in range(len(res.ratio)):
                rows.append([axis, res.edges[i], res.edges[i + 1], int(hg.counts[i]), int(hr.counts[i]),
                             res.ratio[i], res.uncertainty[i], res.reference_mass[i], int(res.excluded[i])])
            summary[f"{axis}_fraction_within_10pct"] = res.fraction_within()
        summary["spatial_fraction_within_10pct"] = metrics.spatial_fraction_within(g, r)
        outputs["ratios.csv"] = _write_csv(out_dir / "ratios.csv", ["axis", "lo", "hi", "generated", "reference",
                                                                    "ratio", "uncertainty", "reference_mass",
                                                                    "excluded"], rows)
    elif args.mode == "yield":
        yc = metrics.yield_comparison(generated, _read_tracks(ref_paths), ev["theta_bin_width"])
        with staged(out_dir / "yield.csv") as tmp:
            yc.to_csv(tmp)
        outputs["yield.csv"] = sha256_file(out_dir / "yield.csv")
        summary["max_abs_relative_difference"] = yc.max_abs_relative_difference()
        summary["missing_bins"] = [[b.theta_lo, b.theta_hi] for b in yc.missing]
    elif args.mode == "occupancy":
        gmap = metrics.occupancy_map(generated, grid)
        rows = [[i // grid.n_cols, i % grid.n_cols, int(c)] for i, c in enumerate(gmap.ravel())]
        outputs["occupancy_generated.csv"] = _write_csv(out_dir / "occupancy_generated.csv",
                                                        ["row", "col", "count"], rows)
        for k, p in enumerate(ref_paths):
            rmap = metrics.occupancy_map(_read_tracks([p]), grid)
            summary[f"chi2_to_reference_{k}"] = metrics.chi2_distance(gmap, rmap)
            summary[f"reference_{k}"] = str(p)
    elif args.mode == "kde":
        refs = {}
        for p in ref_paths:
            recs = _read_tracks([p])
            if recs:
                refs.setdefault(recs[0].pid, []).extend(recs)
        if set(refs) != {"pion", "kaon"}:
            raise EvaluationError("kde mode needs one pion and one kaon --reference dataset")
        bw = ev["bandwidths"]
        kp = kde_mod.kde_fit(refs["pion"], bw, "pion", grid)
        kk = kde_mod.kde_fit(refs["kaon"], bw, "kaon", grid)
        results = kde_mod.dll_many(generated, kp, kk, grid, yield_term=ev["yield_term"], threads=cfg["threads"])
        rows = [[i, t.pid, t.momentum, t.theta, r.n_hits, repr(r.value), r.n_floored, int(r.empty)]
                for i, (t, r) in enumerate(zip(generated, results))]
        outputs["dll.csv"] = _write_csv(out_dir / "dll.csv", ["index", "pid", "momentum", "theta", "n_hits", "dll",
                                                              "n_floored", "empty"], rows)
        dp = [r.value for t, r in zip(generated, results) if t.pid == "pion"]
        dk = [r.value for t, r in zip(generated, results) if t.pid == "kaon"]
        summary["n_floored"] = int(sum(r.n_floored for r in results))
        summary["bandwidths_pion"] = kp.bandwidths.tolist()
        summary["bandwidths_kaon"] = kk.bandwidths.tolist()
        if dp and dk:
            e = kde_mod.separation_power(dp, dk, ev["method"])
            sep = kde_mod.SeparationResult([e])
            with staged(out_dir / "separation.csv") as tmp:
                sep.to_csv(tmp)
            outputs["separation.csv"] = sha256_file(out_dir / "separation.csv")
            summary["separation"] = e.separation
            summary["pion_dll_positive"] = float(np.mean(np.array(dp) > 0))
            summary["kaon_dll_negative"] = float(np.mean(np.array(dk) < 0))
    elif args.mode == "classifier":
        from .model import load_checkpoint

        if ckpt is None:
            raise ConfigError("evaluate --mode classifier needs --ckpt")
        model, _ = load_checkpoint(ckpt)
        m = metrics.classifier_metrics(model, generated, tokenizer, _theta_edges(cfg, generated))
        summary.update({"accuracy": m.accuracy, "roc_auc": m.roc_auc, "n": m.n,
                        "mean_separation": m.mean_separation})
        rows = [[e.theta_lo, e.theta_hi, e.mu_pi, e.sigma_pi, e.mu_k, e.sigma_k, e.separation]
                for e in m.separation]
        outputs["classifier_separation.csv"] = _write_csv(
            out_dir / "classifier_separation.csv",
            ["theta_lo", "theta_hi", "mu_pi", "sigma_pi", "mu_k", "sigma_k", "separation"], rows)
    with staged(out_dir / "summary.json") as tmp:
        tmp.write_text(_dump_summary(summary))
    outputs["summary.json"] = sha256_file(out_dir / "summary.json")
    print(json.dumps(_json_safe(summary), sort_keys=True))
    return RunManifest("evaluate", cfg, cfg["seed"], inputs=_hash_inputs(inputs), outputs=outputs)


def cmd_selftest(args, cfg) -> RunManifest:
    from .selftest import format_table, run_checks

    results = run_checks(quick=args.quick)
    print(format_table(results))
    manifest = RunManifest("selftest", cfg, cfg["seed"])
    manifest.exit_code = EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST_FAILED
    if args.out_dir:
        out_dir = _out_dir(args.out_dir)
        manifest.outputs["selftest.csv"] = _write_csv(
            out_dir / "selftest.csv", ["check", "value", "tolerance", "passed"],
            [[r.name, repr(r.value), r.tolerance, int(r.passed)] for r in results])
    return manifest


# --- parser -------------------------------------------------------------------

def _bounds(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("bounds must be four comma-separated numbers") from None
    if len(values) != 4:
        raise argparse.ArgumentTypeError("bounds must be p_min,p_max,theta_min,theta_max")
    return values


def _triple(text: str) -> list[float]:
    values = [float(v) for v in text.split(",")]
    if len(values) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (see docs/cli.md)")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads for torch and the KDE kernel (default 1)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--data", action="append", required=True, help="training dataset (repeatable)")
    train_flags.add_argument("--val-data", action="append", help="validation dataset for accuracy (repeatable)")
    train_flags.add_argument("--out-dir", required=True)
    train_flags.add_argument("--iters", type=int)
    train_flags.add_argument("--batch-size", type=int)
    train_flags.add_argument("--lr", type=float)
    train_flags.add_argument("--schedule", choices=["constant", "cosine"])
    train_flags.add_argument("--warmup-iters", type=int)
    train_flags.add_argument("--eval-every", type=int)
    train_flags.add_argument("--checkpoint-every", type=int)
    train_flags.add_argument("--freeze-embeddings", action="store_true", default=None)

    parser = argparse.ArgumentParser(prog="dircformer", description="Split-vocabulary transformer for DIRC hits.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("simulate-toy", parents=[common], help="sample tracks from the toy detector")
    p.add_argument("--pid", required=True, choices=["pion", "kaon"])
    p.add_argument("--n-tracks", type=int, required=True)
    p.add_argument("--bounds", type=_bounds, help="p_min,p_max,theta_min,theta_max")
    p.add_argument("--momentum", type=float, help="fixed momentum (GeV/c); needs --theta")
    p.add_argument("--theta", type=float, help="fixed polar angle (deg); needs --momentum")
    p.add_argument("--no-fold", action="store_true", default=None, help="drop hits outside the grid")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common, train_flags], help="train a generator or a scratch classifier")
    p.add_argument("--mode", choices=["generative", "classifier"], default="generative")
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--n-blocks", type=int)

    p = sub.add_parser("finetune", parents=[common, train_flags], help="fine-tune a classifier from a generator")
    p.add_argument("--backbone", required=True, help="generative checkpoint")

    p = sub.add_parser("generate", parents=[common], help="sample tracks from a generative checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pid", choices=["pion", "kaon"])
    p.add_argument("--momentum", type=float, required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--n-tracks", type=int, required=True)
    p.add_argument("--nucleus-p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-hits", type=int)
    p.add_argument("--eos-policy", choices=["joint", "both", "either"])
    p.add_argument("--batch-size", dest="gen_batch_size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("classify", parents=[common], help="score tracks with a classifier checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="closure metrics as CSV tables")
    p.add_argument("--mode", required=True, choices=EVAL_MODES)
    p.add_argument("--generated", action="append", help="dataset under test (repeatable)")
    p.add_argument("--reference", action="append", help="reference dataset (repeatable)")
    p.add_argument("--ckpt", help="classifier checkpoint for --mode classifier")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--theta-bin-width", type=float)
    p.add_argument("--pixels-per-bin", type=int)
    p.add_argument("--time-bin-ns", type=float)
    p.add_argument("--bandwidths", type=_triple, help="h_x,h_y,h_t (mm, mm, ns); default Scott's rule")
    p.add_argument("--yield-term", action="store_true", default=None, help="add the Poisson hit-count term to DLL")
    p.add_argument("--method", choices=["moments", "fit"])

    p = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    p.add_argument("--quick", action="store_true", help="smaller samples, same tolerances")
    p.add_argument("--out-dir")
    return parser


_COMMANDS = {
    "simulate-toy": cmd_simulate_toy, "train": cmd_train, "finetune": cmd_finetune, "generate": cmd_generate,
    "classify": cmd_classify, "evaluate": cmd_evaluate, "selftest": cmd_selftest,
}


def _manifest_path(args) -> Path | None:
    if getattr(args, "out", None):
        out = Path(args.out)
        return out.with_name(out.name + ".manifest.json")
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "manifest.json"
    return None


def _report_error(exc: BaseException, code: int, category: str) -> int:
    print(json.dumps({"error": category, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help/--version exit 0
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        _set_threads(cfg["threads"])
        manifest = _COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        return _report_error(KeyboardInterrupt("interrupted"), EXIT_INTERRUPTED, "interrupted")
    except DircError as exc:
        return _report_error(exc, exc.exit_code, exc.category)
    except FileNotFoundError as exc:
        return _report_error(exc, MissingFileError.exit_code, MissingFileError.category)
    except Exception as exc:  # unexpected: keep the traceback in debug logs
        log.debug("unexpected failure", exc_info=True)
        return _report_error(exc, DircError.exit_code, "internal")
    manifest.argv = list(sys.argv[1:] if argv is None else argv)
    manifest.wall_clock_s = round(time.perf_counter() - start, 3)
    path = _manifest_path(args)
    if path is not None:
        manifest.write(path)
    return manifest.exit_code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
