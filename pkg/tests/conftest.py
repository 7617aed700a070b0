import numpy as np
import pytest

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion reported in the summary")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        if report.outcome != "passed" and report.longrepr is not None:
            detail = str(getattr(report.longrepr, "reprcrash", None) and report.longrepr.reprcrash.message or detail)
        _CRITERIA.append((marker.args[0], report.outcome == "passed", detail.splitlines()[0] if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    passed = sum(ok for _, ok, _ in _CRITERIA)
    terminalreporter.write_line(f"{passed}/{len(_CRITERIA)} acceptance criteria passed")
