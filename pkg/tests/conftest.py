import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from residuemap.presets import get_preset

settings.register_profile("residuemap", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("residuemap")

ACCEPTANCE = []


@pytest.fixture(scope="session")
def fdg():
    return get_preset("fdg")


@pytest.fixture(scope="session")
def h2o():
    return get_preset("h2o")


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def report():
    """Record one acceptance line: ``report(n, passed, detail)``."""

    def add(n, passed, detail):
        ACCEPTANCE.append((n, bool(passed), detail))
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")

    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
