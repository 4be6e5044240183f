import numpy as np
import pytest

from contagion_hjb import hjb_solver as hs
from contagion_hjb.model import benchmark


@pytest.fixture(scope="session")
def cfg():
    return benchmark()


@pytest.fixture(scope="session")
def grid():
    return hs.Grid(201, 3000)


@pytest.fixture(scope="session")
def small_grid():
    return hs.Grid(41, 300)


@pytest.fixture(scope="session")
def surfaces(cfg, grid):
    return hs.recursive_solve(cfg, grid, hs.SolveOptions())


@pytest.fixture(scope="session")
def small_surfaces(cfg, small_grid):
    return hs.recursive_solve(cfg, small_grid, hs.SolveOptions())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from _support import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
