import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from koopman_reproj.experiments import RunConfig, fit_pipeline

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def load_config(name: str) -> RunConfig:
    return RunConfig.load(CONFIGS / f"{name}.json")


@pytest.fixture(scope="session")
def pitchfork_fit():
    return fit_pipeline(load_config("pitchfork"))


@pytest.fixture(scope="session")
def duffing_fit():
    return fit_pipeline(load_config("duffing"))


@pytest.fixture(scope="session")
def lorenz_fit():
    return fit_pipeline(load_config("lorenz"))


@pytest.fixture(scope="session")
def lorenz_nox1_fit():
    return fit_pipeline(load_config("lorenz_nox1"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance report ----------------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line each in the terminal summary,
# followed by whatever they recorded under the "detail" property.

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if number in _criteria and _criteria[number][0] == "FAIL":
        return
    _criteria[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, detail = _criteria[n]
        line = f"[{status}] criterion {n:2d}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
    passed = sum(s == "PASS" for s, _, _ in _criteria.values())
    terminalreporter.write_line(f"{passed}/{len(_criteria)} criteria passed")
