import numpy as np
import pytest

from mcdm import tensor as tn


@pytest.fixture
def f64():
    with tn.precision("float64"):
        yield


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


_CRITERIA = []


@pytest.fixture
def report():
    """report(name, ok, detail): one PASS/FAIL line per acceptance criterion."""
    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
