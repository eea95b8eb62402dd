import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from tripad.backbone import BackboneVariant  # noqa: E402
from tripad.config import ModelConfig, TrainConfig  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def small_config():
    """A fast configuration used across pipeline and CLI tests."""
    return ModelConfig(
        window=16, stride=1, patch_sizes=(4, 8), d=4, d_prime=8, channels=2,
        backbone=BackboneVariant("pretrained_frozen", d_model=16, layers=1, heads=2),
        train=TrainConfig(epochs=1, batch_size=8, seed=0),
    )


@pytest.fixture
def micro_config():
    """Identity backbone, single scale: the gradient-check configuration."""
    return ModelConfig(
        window=16, stride=1, patch_sizes=(4,), d=4, d_prime=8, channels=2,
        backbone=BackboneVariant("identity", d_model=8, layers=1, heads=1),
    )


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
