import numpy as np
import pytest

from condserv.demomodel import DemoSet
from condserv.flow import OracleFlow
from condserv.sim import preset, record_all


@pytest.fixture(scope="session")
def sim():
    return preset("standard3")


@pytest.fixture(scope="session")
def demos(sim):
    return DemoSet(tuple(record_all(sim)))


@pytest.fixture(scope="session")
def oracle(sim):
    return OracleFlow(sim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
