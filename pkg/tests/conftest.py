import numpy as np
import pytest

from fiberlay.grid import PhaseGrid, build_operators
from fiberlay.model import PotentialSpec

_CRITERIA = {}


@pytest.fixture(scope="session")
def quad():
    return PotentialSpec.quadratic()


@pytest.fixture(scope="session")
def ops64(quad):
    return build_operators(quad, PhaseGrid(64, 64, 32, 6.0))


@pytest.fixture(scope="session")
def ops32(quad):
    return build_operators(quad, PhaseGrid(32, 32, 16, 6.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    def record(n, passed, detail):
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
