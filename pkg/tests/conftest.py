import numpy as np
import pytest

from floodcal.scenario import builtin, realize


@pytest.fixture(scope="session")
def case1():
    return realize(builtin("case1"))


@pytest.fixture(scope="session")
def twin5():
    return realize(builtin("twin5"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(label, passed, detail):
        lines[str(label)] = f"criterion {label:<3} {'PASS' if passed else 'FAIL'}  {detail}"
        print(lines[str(label)])
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        num = "".join(ch for ch in key if ch.isdigit())
        return int(num or 0), key
    for key in sorted(lines, key=order):
        terminalreporter.write_line(lines[key])
