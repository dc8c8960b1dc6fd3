from pathlib import Path

import numpy as np
import pytest

from pcnnsim import network as nw
from pcnnsim.cli import _test_subset
from pcnnsim.mnist import load_mnist

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist"
HELDOUT_SEED = 7

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist(DATA, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(DATA, "test")


@pytest.fixture(scope="session")
def trained_bundle(mnist_train):
    x, y = mnist_train
    return nw.train_reference(x, y, epochs=10, seed=7)


@pytest.fixture(scope="session")
def heldout(mnist_test):
    """200 random test images, plus the indices used."""
    x, y = mnist_test
    return _test_subset(x, y, 200, HELDOUT_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
