import numpy as np
import pytest
import torch

from dircformer.records import TrackRecord
from dircformer.tokenizer import Tokenizer
from dircformer.toy import ToyDetectorConfig, simulate_dataset


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer()


@pytest.fixture(scope="session")
def toy_cfg():
    return ToyDetectorConfig()


@pytest.fixture(scope="session")
def pion_tracks(toy_cfg):
    return simulate_dataset("pion", 300, cfg=toy_cfg, seed=101)


@pytest.fixture(scope="session")
def kaon_tracks(toy_cfg):
    return simulate_dataset("kaon", 300, cfg=toy_cfg, seed=202)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_track(rng, n_hits, pid="pion", tokenizer=None):
    tokenizer = tokenizer or Tokenizer()
    return TrackRecord(pid, float(rng.uniform(1, 10)), float(rng.uniform(25, 160)),
                       rng.integers(0, tokenizer.grid.n_pixels, n_hits),
                       rng.uniform(0, 140, n_hits)).sorted()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the run."""
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = list(getattr(mod, "RESULTS", {}).values())
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
