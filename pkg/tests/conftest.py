import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a):
    from redkit.autodiff import Tensor
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
