import numpy as np
import pytest

from asyncpfl.tasks import make_fleet

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def quad_fleet():
    return make_fleet("quadratic", 10, 1.0, 20, np.random.default_rng(0), noise=0.5)


@pytest.fixture
def small_fleet():
    return make_fleet("quadratic", 4, 0.5, 5, np.random.default_rng(1), noise=0.3)


@pytest.fixture
def logistic_fleet():
    return make_fleet("logistic", 4, 1.0, 5, np.random.default_rng(2), pool_size=60)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
