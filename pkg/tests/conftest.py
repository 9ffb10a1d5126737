import numpy as np
import pytest

from loopda import kernels
from loopda.models import Lorenz63Params, advance


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def attractor_states():
    """200 Lorenz 63 states on the attractor (seeded, spun up 10 units)."""
    r = np.random.default_rng(7)
    X0 = r.normal(0.0, 5.0, size=(200, 3)) + [0.0, 0.0, 25.0]
    return advance(X0, Lorenz63Params(), 10.0)


@pytest.fixture(params=kernels.available())
def backend(request):
    previous = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


# acceptance criteria report: test_acceptance appends (number, passed, detail)
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
