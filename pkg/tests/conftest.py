import numpy as np
import pytest

from advloop.data import make_synthetic
from advloop.nn import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs10():
    return make_synthetic(20, 10, seed=3, name="blobs", version="1")


@pytest.fixture
def small_mlp():
    return build_model("MLP", seed=0, hidden=16)


@pytest.fixture
def small_cnn():
    return build_model("SmallCNN", seed=0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    out = lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
