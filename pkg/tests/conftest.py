"""Collects ``@pytest.mark.criterion`` outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_RESULTS: dict[str, tuple[bool, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when in ("setup", "call"):
        passed, seconds = _RESULTS.get(name, (True, 0.0))
        _RESULTS[name] = (passed and rep.passed, seconds + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, seconds) in _RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  ({seconds:.1f} s)")
