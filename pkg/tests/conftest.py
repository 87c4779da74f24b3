"""Acceptance bookkeeping: one summary line per criterion at the end of the run."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    observed = dict(report.user_properties).get("observed", "")
    if report.when == "setup" and report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
        _RESULTS[number] = ("SKIP", title, reason.removeprefix("Skipped: "))
    elif report.when == "call":
        state = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _RESULTS[number] = (state, title, observed)
    elif report.failed:
        _RESULTS[number] = ("FAIL", title, f"error during {report.when}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        state, title, note = _RESULTS[number]
        line = f"criterion {number}: {state}  {title}"
        terminalreporter.write_line(line + (f"  [{note}]" if note else ""))
