import numpy as np
import pytest

from qbsde.bsde import solve_bsde_lsmc
from qbsde.generator import pure_quadratic
from qbsde.paths import TimeGrid, brownian, simulate_forward

ENTROPIC_PATHS = 2**16
ENTROPIC_STEPS = 50
ENTROPIC_SEED = 7


def linear_terminal(x):
    return x[:, 0]


@pytest.fixture(scope="session")
def entropic_generator():
    return pure_quadratic(1.0, 1)


@pytest.fixture(scope="session")
def entropic_bundle():
    return simulate_forward(brownian(1), 0.0, [0.0], TimeGrid(1.0, ENTROPIC_STEPS), ENTROPIC_PATHS, ENTROPIC_SEED)


@pytest.fixture(scope="session")
def entropic_solution(entropic_generator, entropic_bundle):
    return solve_bsde_lsmc(entropic_generator, linear_terminal, entropic_bundle)


@pytest.fixture(scope="session")
def small_bundle():
    return simulate_forward(brownian(1), 0.0, [0.0], TimeGrid(1.0, 20), 2**13, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
