import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    # a criterion passes only if every test carrying it ran and passed
    if mark is None or not (report.when == "call" or (report.when == "setup" and not report.passed)):
        return
    n, title = mark.args
    prev = _results.get(n, (title, True, []))
    notes = prev[2] + [str(value) for key, value in item.user_properties if key == "measured"]
    _results[n] = (title, prev[1] and report.passed, notes)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, notes = _results[n]
        detail = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}{detail}")
