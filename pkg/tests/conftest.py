import numpy as np
import pytest

from stochwave.assembly import PhysParams, assemble
from stochwave.domain import DomainConfig, build_grid

REF = PhysParams(rho=1.0, c=1.0, m=0.1, d=3.0, k=1.0)

ACCEPTANCE_LINES: list[str] = []


def make_ops(nx=9, params=REF, dimension=1, ny=4, K=None, length_y=1.0):
    cfg = DomainConfig(dimension, 1.0, nx, length_y=length_y, ny=ny)
    return assemble(build_grid(cfg), params, K)


@pytest.fixture(scope="session")
def ops9():
    return make_ops(9)


@pytest.fixture(scope="session")
def ops5():
    return make_ops(5)


@pytest.fixture(scope="session")
def ops2d():
    return make_ops(9, dimension=2, ny=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
