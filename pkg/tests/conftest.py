import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robustlens.datasets import LabeledDataset
from robustlens.nn import init_state, small_convnet_spec

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_spec(channels=2, size=8, n_classes=3, batchnorm=False, mean=None, std=None):
    return small_convnet_spec((channels, size, size), n_classes, channels=(3, 4), hidden=6, batchnorm=batchnorm,
                              mean=mean, std=std)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return init_state(tiny_spec(), 0)


@pytest.fixture
def tiny_batch(rng):
    return rng.uniform(0, 1, size=(5, 2, 8, 8)), np.array([0, 1, 2, 1, 0])


def small_images(n=48, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    x = rng.uniform(0, 0.3, size=(n, 2, 8, 8))
    for k in range(3):
        x[y == k, k % 2, 2 * k : 2 * k + 3, :] += 0.6
    return LabeledDataset(np.clip(x, 0, 1), y, 3)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
