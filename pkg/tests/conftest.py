import pytest

from semforge.diffusion import make_toy_model
from semforge.numerics import SeededRng

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def model_a1():
    return make_toy_model("A", 1)


@pytest.fixture(scope="session")
def model_a2():
    return make_toy_model("A", 2)


@pytest.fixture(scope="session")
def model_c1():
    return make_toy_model("C", 1)


@pytest.fixture(scope="session")
def mlp_a1():
    return make_toy_model("A", 1, "tiny-mlp")


@pytest.fixture
def rng():
    return SeededRng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
