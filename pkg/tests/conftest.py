import pytest

# criterion number -> [title, passed, notes]
CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = CRITERIA.setdefault(number, [title, True, []])
    if not report.passed:
        entry[1] = False
    entry[2].extend(f"{k}={v}" for k, v in item.user_properties if report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, notes = CRITERIA[number]
        line = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}"
        if notes:
            line += "  [" + "; ".join(dict.fromkeys(notes)) + "]"
        terminalreporter.write_line(line)
