import numpy as np
import pytest

from neuvec.linalg import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def random_spd(n, seed=0):
    r = np.random.default_rng(seed)
    M = r.standard_normal((n, n))
    return M.T @ M + np.eye(n)


# -- acceptance summary: one PASS/FAIL line per criterion --------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    item_info = getattr(report, "criterion", None)
    if item_info is None:
        return
    n, title = item_info
    failed = report.failed
    prev = _CRITERIA.get(n, (title, True))
    if report.when == "call" or failed:
        _CRITERIA[n] = (title, prev[1] and report.passed and not failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
