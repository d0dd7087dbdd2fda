import numpy as np
import pytest
import torch

from uvector.audio import SpeakerProfile


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def profile():
    return SpeakerProfile(pitch_hz=120.0, formants=((550, 80), (1500, 100), (2500, 140), (3500, 180)),
                          jitter=0.01, seed=11)


def tone(freq, seconds=1.0, sr=16_000, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
