import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from eegfm.eegdata import PATCH_SIZE, PatchBatch
from eegfm.model import BatchTensors, FoundationModel, get_variant

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def random_batch(rng, B=2, T=3, C=4, valid=None, dtype=torch.float64) -> BatchTensors:
    valid = [C] * B if valid is None else list(valid)
    patches = rng.standard_normal((B, T, C, PATCH_SIZE))
    for i, v in enumerate(valid):
        patches[i, :, v:] = 0.0
    ids = np.stack([rng.choice(90, C, replace=False) for _ in range(B)])
    batch = PatchBatch(patches, ids, rng.integers(0, 10, B), rng.integers(0, 3, B), np.asarray(valid))
    return BatchTensors.from_batch(batch, dtype)


def tiny_model(seed=0, dtype=torch.float64) -> FoundationModel:
    torch.manual_seed(seed)
    return FoundationModel(get_variant("tiny")).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="module")
def model64():
    m = tiny_model()
    m.eval()
    return m


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
