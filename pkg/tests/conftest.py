"""Shared fixtures and the per-criterion summary for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n)`` are collected into one
PASS/FAIL line each at the end of the run. Numbers a test attaches with
``record_property`` are appended to its line.
"""

import time

import pytest

_results: dict[int, tuple[str, str, float, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown":
        return
    n = mark.args[0]
    title = (item.function.__doc__ or item.name).strip().splitlines()[0]
    if report.when == "setup" and report.passed:
        return
    status = "PASS" if report.passed else "FAIL"
    _results[n] = (status, title, report.duration, list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, title, seconds, props = _results[n]
        extra = " ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{status} criterion {n:>2}: {title} [{seconds:.1f}s] {extra}".rstrip())


@pytest.fixture(scope="session")
def default_table():
    """The default mini-bench oracle table, built once per session."""
    from dartsminus.config import RunConfig
    from dartsminus.minibench import build_table

    spec = RunConfig().bench()
    start = time.perf_counter()
    table = build_table(spec)
    return spec, table, time.perf_counter() - start
