from __future__ import annotations

import pytest

from autoshard import fixtures

from helpers import ACCEPTANCE_DETAILS


@pytest.fixture(scope="session")
def fig3():
    return fixtures.load_fixture("fig3")


@pytest.fixture(scope="session")
def recsys():
    return fixtures.load_fixture("recsys")


_CRITERIA = {}


def pytest_runtest_logreport(report):
    # one PASS/FAIL verdict per acceptance criterion, whatever the phase that failed
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.failed or report.skipped:
        _CRITERIA[name] = "FAIL"
    elif report.when == "call" and _CRITERIA.get(name) != "FAIL":
        _CRITERIA[name] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        number = int(name.split("_")[2])
        title = name.split("_", 3)[3].replace("_", " ")
        detail = ACCEPTANCE_DETAILS.get(number, "no measurement recorded")
        terminalreporter.write_line(f"{_CRITERIA[name]} criterion {number:2d} ({title}): {detail}")
