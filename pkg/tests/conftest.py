import numpy as np
import pytest

from algnet.tensor import get_tape, precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture(autouse=True)
def _clean_tape():
    get_tape().reset()
    yield
    get_tape().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
