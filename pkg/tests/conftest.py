import numpy as np
import pytest

from eghn import autodiff as ad


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
