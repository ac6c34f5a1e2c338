import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from almpc.allocation import InputLimits, ThrusterLayout
from almpc.backstepping import BackstepGains
from almpc.dynamics import default_hydro
from almpc.estimation import ModeLibrary
from almpc.scenario import ScenarioConfig, run

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def hydro():
    return default_hydro()


@pytest.fixture(scope="session")
def layout():
    return ThrusterLayout.vectored_x()


@pytest.fixture(scope="session")
def limits():
    return InputLimits()


@pytest.fixture(scope="session")
def gains():
    return BackstepGains()


@pytest.fixture(scope="session")
def library():
    return ModeLibrary()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_RUNS = {}


def scenario_run(case: int, controller: str):
    """Closed-loop runs with the default config, computed once per session."""
    key = (case, controller)
    if key not in _RUNS:
        _RUNS[key] = run(ScenarioConfig(case=case, controller=controller))
    return _RUNS[key]


@pytest.fixture(scope="session")
def runs():
    return scenario_run


_ACCEPTANCE: dict = {}


@pytest.fixture
def report(capsys):
    """Print and remember one pass/fail line per acceptance criterion."""

    def _report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
