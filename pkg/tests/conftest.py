import numpy as np
import pytest

from meue.network import builtin_network
from meue.routing import builtin_routes


@pytest.fixture(scope="session")
def net3():
    return builtin_network("3n4l")


@pytest.fixture(scope="session")
def rs3(net3):
    return builtin_routes(net3)


@pytest.fixture(scope="session")
def netc():
    return builtin_network("counterexample")


@pytest.fixture(scope="session")
def rsc(netc):
    return builtin_routes(netc)


@pytest.fixture(scope="session")
def sioux():
    return builtin_network("siouxfalls")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def report(request):
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    lines = request.config.stash[_LINES]

    def emit(line):
        lines.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
