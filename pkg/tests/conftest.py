import pytest

_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = "; ".join(v for k, v in item.user_properties if k == "detail")
        status = "PASS" if report.passed else "FAIL"
        _LINES.append(f"{status}  {marker.args[0]}" + (f"  ({details})" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
