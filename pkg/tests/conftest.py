import numpy as np
import pytest

from crossmap.dataio import SynthConfig, TrialSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth():
    return SynthConfig(n_classes=4, n_channels=3, n_samples=32, n_trials_per_subject=80,
                       noise_sigma=1.0, seed=7)


def make_trials(rng, n=6, n_channels=2, n_samples=16, n_classes=3):
    labels = rng.integers(1, n_classes + 1, size=n)
    signals = rng.standard_normal((n, n_channels, n_samples)).astype(np.float32)
    return TrialSet(labels, signals, n_classes, 500.0)


# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
