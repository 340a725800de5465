import pytest
import torch

from posemoe.data import PoseDataset, generate_synthetic
from posemoe.model import ModelConfig
from posemoe.tensor_core import Rng

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(frames=4, joints=5, dim=8, heads=2, encoder_layers=2, decoder_layers=1)


@pytest.fixture(scope="session")
def small_dataset():
    return PoseDataset.from_triples(generate_synthetic(3, 4, 9))


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record and print one acceptance line; fails the test when the criterion fails."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        request.config.stash.setdefault(_VERDICTS, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
