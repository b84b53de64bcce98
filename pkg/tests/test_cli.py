import json
import subprocess
import sys

import pytest

from dircformer import __version__
from dircformer.cli import config_schema, main, sha256_file
from dircformer.data import read_dataset

TINY = ["--d-model", "16", "--n-heads", "2", "--n-blocks", "1", "--iters", "3", "--batch-size", "8"]


def run(*argv):
    return main([str(a) for a in argv])


def manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("simulate-toy", "--pid", "pion", "--n-tracks", 60, "--seed", 1, "--out", d / "pion.dsf") == 0
    assert run("simulate-toy", "--pid", "kaon", "--n-tracks", 60, "--seed", 2, "--out", d / "kaon.dsf") == 0
    for pid, seed in (("pion", 3), ("kaon", 4)):
        assert run("simulate-toy", "--pid", pid, "--n-tracks", 40, "--momentum", 3, "--theta", 60, "--seed", seed,
                   "--out", d / f"{pid}_ref.dsf") == 0
    assert run("train", "--data", d / "pion.dsf", "--out-dir", d / "gen", *TINY) == 0
    return d


def test_version_entry_point():
    out = subprocess.run([sys.executable, "-m", "dircformer.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


def test_simulate_writes_dataset_and_manifest(work):
    header, recs = read_dataset(work / "pion.dsf")
    assert header.pid == "pion" and len(recs) == 60 and header.extra["source"] == "toy"
    m = manifest(work / "pion.dsf.manifest.json")
    assert m["subcommand"] == "simulate-toy" and m["seed"] == 1 and m["exit_code"] == 0
    assert m["outputs"]["pion.dsf"] == sha256_file(work / "pion.dsf")
    assert not list(work.glob(".*partial"))


def test_simulate_is_deterministic(work, tmp_path):
    assert run("simulate-toy", "--pid", "pion", "--n-tracks", 60, "--seed", 1, "--out", tmp_path / "a.dsf") == 0
    assert sha256_file(tmp_path / "a.dsf") == sha256_file(work / "pion.dsf")
    assert run("simulate-toy", "--pid", "pion", "--n-tracks", 60, "--seed", 5, "--out", tmp_path / "b.dsf") == 0
    assert sha256_file(tmp_path / "b.dsf") != sha256_file(work / "pion.dsf")


def test_train_outputs(work):
    gen = work / "gen"
    assert {p.name for p in gen.iterdir()} >= {"model.ckpt", "train_log.csv", "manifest.json"}
    m = manifest(gen / "manifest.json")
    assert m["config"]["model"]["d_model"] == 16 and m["config"]["train"]["max_iters"] == 3
    assert str(work / "pion.dsf") in m["inputs"]
    assert len((gen / "train_log.csv").read_text().splitlines()) == 4


def test_train_rejects_mixed_classes(work, tmp_path):
    assert run("train", "--data", work / "pion.dsf", "--data", work / "kaon.dsf", "--out-dir", tmp_path,
               *TINY) == 4


def test_generate_deterministic_and_batch_invariant(work, tmp_path):
    args = ["generate", "--ckpt", work / "gen" / "model.ckpt", "--momentum", 3, "--theta", 60, "--n-tracks", 5,
            "--max-hits", 8, "--seed", 7]
    assert run(*args, "--out", tmp_path / "a.dsf") == 0
    assert run(*args, "--batch-size", 2, "--out", tmp_path / "b.dsf") == 0
    assert sha256_file(tmp_path / "a.dsf") == sha256_file(tmp_path / "b.dsf")
    header, recs = read_dataset(tmp_path / "a.dsf")
    assert header.pid == "pion" and header.extra["source"] == "generated" and len(recs) == 5
    assert manifest(tmp_path / "a.dsf.manifest.json")["config"]["generation"]["max_hits"] == 8


@pytest.mark.parametrize("mode", ["ratios", "yield", "occupancy"])
def test_evaluate_modes(work, tmp_path, mode, capsys):
    assert run("evaluate", "--mode", mode, "--generated", work / "pion_ref.dsf", "--reference",
               work / "pion_ref.dsf", "--out-dir", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mode"] == mode
    if mode == "ratios":
        assert summary["spatial_fraction_within_10pct"] == 1.0
    if mode == "yield":
        assert summary["max_abs_relative_difference"] == 0.0
    if mode == "occupancy":
        assert summary["chi2_to_reference_0"] == 0.0
    assert (tmp_path / "manifest.json").exists()


def test_evaluate_kde(work, tmp_path):
    # the 40-track references are below the 1000-hit guideline: warned about, not fatal
    with pytest.warns(RuntimeWarning, match="fewer than 1000|< 1000"):
        code = run("evaluate", "--mode", "kde", "--generated", work / "pion_ref.dsf", "--generated",
                   work / "kaon_ref.dsf", "--reference", work / "pion_ref.dsf", "--reference",
                   work / "kaon_ref.dsf", "--out-dir", tmp_path)
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["separation"] > 0
    assert len((tmp_path / "dll.csv").read_text().splitlines()) == 81


def test_evaluate_kde_needs_both_references(work, tmp_path):
    assert run("evaluate", "--mode", "kde", "--generated", work / "pion_ref.dsf", "--reference",
               work / "pion_ref.dsf", "--out-dir", tmp_path) == 8


def test_finetune_classify_evaluate(work, tmp_path):
    backbone = work / "gen" / "model.ckpt"
    before = sha256_file(backbone)
    assert run("finetune", "--backbone", backbone, "--data", work / "pion.dsf", "--data", work / "kaon.dsf",
               "--iters", 3, "--batch-size", 8, "--out-dir", tmp_path / "ft") == 0
    assert sha256_file(backbone) == before
    m = manifest(tmp_path / "ft" / "manifest.json")
    assert m["inputs"][str(backbone)] == before
    assert run("classify", "--ckpt", tmp_path / "ft" / "model.ckpt", "--data", work / "pion_ref.dsf", "--data",
               work / "kaon_ref.dsf", "--out-dir", tmp_path / "cls") == 0
    assert len((tmp_path / "cls" / "scores.csv").read_text().splitlines()) == 81
    assert (tmp_path / "cls" / "metrics.json").exists()
    assert run("evaluate", "--mode", "classifier", "--ckpt", tmp_path / "ft" / "model.ckpt", "--generated",
               work / "pion_ref.dsf", "--generated", work / "kaon_ref.dsf", "--out-dir", tmp_path / "ev") == 0
    # a generative checkpoint cannot classify
    assert run("classify", "--ckpt", backbone, "--data", work / "pion_ref.dsf", "--out-dir",
               tmp_path / "bad") == 6


def test_train_classifier_from_scratch(work, tmp_path):
    assert run("train", "--mode", "classifier", "--data", work / "pion.dsf", "--data", work / "kaon.dsf",
               "--val-data", work / "pion_ref.dsf", "--eval-every", 3, "--out-dir", tmp_path, *TINY) == 0
    assert "accuracy" in (tmp_path / "train_log.csv").read_text().splitlines()[0]


# --- config precedence ----------------------------------------------------------

def test_config_file_and_flag_precedence(work, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 11\ntoy:\n  base_yield: 30.0\ngeneration:\n  temperature: 0.9\n")
    assert run("simulate-toy", "--config", cfg, "--pid", "kaon", "--n-tracks", 5, "--out", tmp_path / "a.dsf") == 0
    m = manifest(tmp_path / "a.dsf.manifest.json")
    assert m["seed"] == 11 and m["config"]["toy"]["base_yield"] == 30.0
    assert m["config"]["generation"]["temperature"] == 0.9
    assert m["config"]["generation"]["nucleus_p"] == 0.995  # default survives
    assert run("simulate-toy", "--config", cfg, "--seed", 12, "--pid", "kaon", "--n-tracks", 5,
               "--out", tmp_path / "b.dsf") == 0
    assert manifest(tmp_path / "b.dsf.manifest.json")["seed"] == 12


def test_schema_lists_sections():
    props = config_schema()["properties"]
    assert {"seed", "threads", "toy", "model", "train", "generation", "evaluation", "phase_space"} <= set(props)


# --- exit codes -----------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("simulate-toy", "--pid", "pion", "--n-tracks", 5, "--bogus", "--out", tmp_path / "x.dsf") == 2
    assert run("generate", "--momentum", 3, "--theta", 60, "--n-tracks", 2, "--out", tmp_path / "y.dsf") == 2
    assert run("explode") == 2
    assert not list(tmp_path.iterdir())


def test_missing_file_exit_3(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "none.dsf", "--out-dir", tmp_path / "o") == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err == {"error": "missing-file", "exit_code": 3, "message": err["message"]}
    assert run("simulate-toy", "--config", tmp_path / "none.yaml", "--pid", "pion", "--n-tracks", 1,
               "--out", tmp_path / "z.dsf") == 3


@pytest.mark.parametrize("text", ["model:\n  d_model: many\n", "colour: red\n", "train: [1, 2\n",
                                  "generation:\n  nucleus_p: 2.0\n"])
def test_bad_config_exit_4(tmp_path, text, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert run("simulate-toy", "--config", cfg, "--pid", "pion", "--n-tracks", 1, "--out", tmp_path / "x.dsf") == 4
    assert not (tmp_path / "x.dsf").exists()


def test_corrupt_dataset_exit_5(work, tmp_path):
    bad = tmp_path / "bad.dsf"
    bad.write_bytes((work / "pion.dsf").read_bytes()[:-5])
    assert run("train", "--data", bad, "--out-dir", tmp_path / "o", *TINY) == 5


def test_corrupt_checkpoint_exit_6(tmp_path):
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_bytes(b"not a checkpoint")
    assert run("generate", "--ckpt", ckpt, "--momentum", 3, "--theta", 60, "--n-tracks", 1,
               "--out", tmp_path / "g.dsf") == 6
    assert not (tmp_path / "g.dsf").exists()


def test_selftest_quick(tmp_path, capsys):
    assert run("selftest", "--quick", "--out-dir", tmp_path) == 0
    table = capsys.readouterr().out
    assert "causal" in table and "FAIL" not in table
    assert (tmp_path / "selftest.csv").exists() and (tmp_path / "manifest.json").exists()
