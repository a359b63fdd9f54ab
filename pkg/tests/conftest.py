import numpy as np
import pytest

from ckksfed import ckks


@pytest.fixture(scope="session")
def params():
    return ckks.CkksParams.create()


@pytest.fixture(scope="session")
def keys(params):
    return ckks.keygen(params, np.random.default_rng(1234))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
