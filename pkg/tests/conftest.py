from __future__ import annotations

import pytest

from skillmux.registry import default_registry

_criteria: dict[int, tuple[str, str]] = {}


@pytest.fixture
def registry():
    return default_registry()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, description = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        previous = _criteria.get(number)
        # A criterion spread over several tests fails if any of them fails.
        if previous is None or previous[0] == "PASS" or status == "FAIL":
            _criteria[number] = (status, description)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, description = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {description}")
