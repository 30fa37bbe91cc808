"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _RESULTS[n] = (title, rep.outcome.upper(), detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, outcome, detail = _RESULTS[n]
        status = "PASS" if outcome == "PASSED" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
