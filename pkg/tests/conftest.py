import functools

import pytest
from hypothesis import HealthCheck, settings

from mfflow.scenarios import build

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def scenario(name, n_points=None, n_steps=None):
    over = {}
    if n_points:
        over["grid"] = {"n_points": n_points}
    if n_steps:
        over["time"] = {"n_steps": n_steps}
    return build(name, **over)


@pytest.fixture(scope="session")
def ref_small():
    """Reference model on a coarse mesh, for quick unit tests."""
    return scenario("state-invariant-ref", 201, 100)


@pytest.fixture(scope="session")
def dep_small():
    return scenario("state-dep-drift", 201, 100)


ACCEPTANCE = {}


@pytest.fixture
def record(capsys):
    """Log one PASS/FAIL line per acceptance criterion (shown live and in the summary)."""

    def _record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
