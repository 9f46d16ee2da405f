"""Acceptance reporting: tests marked ``criterion(n, title)`` get one PASS/FAIL
line each in the terminal summary, with any measured values they recorded."""
import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = mark.args
        details = [f"{k}={v}" for k, v in item.user_properties]
        _results[number] = (title, "PASS" if rep.passed else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, verdict, details = _results[number]
        extra = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {number:>2} {verdict}: {title}{extra}")
