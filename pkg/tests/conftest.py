import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest
from hypothesis import HealthCheck, settings

from arefs.targets import Potential, default_trig_potential, normalize

settings.register_profile("numerics", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("numerics")


@pytest.fixture(scope="session")
def flat():
    return normalize(Potential.flat(), 64)


@pytest.fixture(scope="session")
def trig():
    return normalize(default_trig_potential(), 256)


@pytest.fixture(scope="session")
def gauss():
    return normalize(Potential.gaussian([0, 0], [1, 1]))


# -- acceptance summary: one line per criterion, failing if any of its tests failed -----------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped or (rep.when != "call" and rep.passed):
        return
    num, label = mark.args
    prev = _CRITERIA.get(num, (label, True))
    _CRITERIA[num] = (label, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        label, ok = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {label}")
