import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from tzperiph import drivers, platform, tee_rt

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def booted():
    """(soc, report) after the fixture boot chain."""
    soc, report = platform.booted_soc()
    assert report.ok
    return soc, report


@pytest.fixture
def runtime_with_driver(booted):
    soc, report = booted
    drv = drivers.trusted_init(soc, soc.i2s_node(), report)
    rt = tee_rt.TeeRuntime(soc)
    rt.register_pta(tee_rt.i2s_pta(drv))
    return soc, drv, rt



# one summary line per acceptance criterion

_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome == "failed":
        previous = _criteria.get(name)
        if previous != "FAIL":
            _criteria[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        number, _, title = name[len("test_criterion_"):].partition("_")
        terminalreporter.write_line(
            f"criterion {int(number):2d} {_criteria[name]}: "
            f"{title.replace('_', ' ')}")
