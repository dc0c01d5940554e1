import numpy as np
import pytest

from artifact.autodiff import precision


@pytest.fixture
def f64():
    """Run the test body with float64 as the default tensor dtype."""
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
