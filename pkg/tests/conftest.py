import math

import numpy as np
import pytest

from nvpos import scenarios
from nvpos.hamiltonian import HyperfineParams, SystemParams

KHZ = 2 * math.pi * 1e3


@pytest.fixture(scope="session")
def c1():
    return scenarios.c1_scenario().calibrated()


@pytest.fixture(scope="session")
def c3():
    return scenarios.c3_scenario().calibrated()


@pytest.fixture
def hf_c1():
    return HyperfineParams.from_khz(18.5, 41.4, 191.0)


@pytest.fixture
def sys_c1():
    return SystemParams.along_z(9.600e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_hermitian(rng, n=4, scale=1.0):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return scale * (a + a.conj().T) / 2


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    import contextlib
    import time

    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        detail = {}
        status = "FAIL"
        try:
            yield detail
            status = "PASS"
        finally:
            extra = ", ".join(f"{k}={v}" for k, v in detail.items())
            line = f"criterion {number} {status}: {title} ({time.perf_counter() - t0:.1f} s{', ' + extra if extra else ''})"
            lines[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
