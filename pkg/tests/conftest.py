"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_OUTCOMES: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    detail = dict(report.user_properties).get("detail", "")
    _OUTCOMES.setdefault(mark.args[0], []).append((item.name, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        rows = _OUTCOMES[n]
        ok = all(outcome == "passed" for _, outcome, _ in rows)
        details = "; ".join(d for _, _, d in rows if d)
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f"  ({details})" if details else ""))
