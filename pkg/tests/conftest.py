import numpy as np
import pytest
import torch

from acoustic_denoise.image import ImageF

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def step_edge():
    """32x32 vertical 0 -> 1 step between columns 15 and 16."""
    x = np.zeros((32, 32))
    x[:, 16:] = 1.0
    return ImageF(x)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
