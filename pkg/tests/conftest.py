import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        previous = _results.get(number, (text, True, ""))
        detail = getattr(item, "criterion_detail", "")
        _results[number] = (text, previous[1] and not failed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        text, ok, detail = _results[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {text}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
