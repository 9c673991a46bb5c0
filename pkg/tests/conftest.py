import numpy as np
import pytest

from delayhjb.demos import closed_form_demo, pointwise_demo, scalar_demo
from delayhjb.hjb import GridConfig, picard_solve


@pytest.fixture(scope="session")
def closed_form_solution():
    spec = closed_form_demo()
    fld, rep = picard_solve(spec, GridConfig(n_time=16, n_space=161))
    return spec, fld, rep


@pytest.fixture(scope="session")
def scalar_solution():
    spec = scalar_demo(running=False)
    fld, rep = picard_solve(spec)
    return spec, fld, rep


@pytest.fixture(scope="session")
def scalar_running_solution():
    spec = scalar_demo(running=True)
    fld, rep = picard_solve(spec)
    return spec, fld, rep


@pytest.fixture(scope="session")
def pointwise_solution():
    spec = pointwise_demo(running=False)
    fld, rep = picard_solve(spec)
    return spec, fld, rep


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
