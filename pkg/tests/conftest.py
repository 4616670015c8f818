import numpy as np
import pytest

from rulegp.anchors import build_cover_set
from rulegp.scene import PROFILES, generate_dataset


@pytest.fixture(scope="session")
def small_grid():
    return generate_dataset(PROFILES["grid-right"], 60, 11)


@pytest.fixture(scope="session")
def small_curve():
    return generate_dataset(PROFILES["curve-left"], 60, 12)


@pytest.fixture(scope="session")
def small_anchors(small_grid, small_curve):
    pool = np.concatenate([small_grid.futures(), small_curve.futures()])
    return build_cover_set(pool, 10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary --------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    ok, _ = _CRITERIA.get(number, (True, title))
    if rep.failed or rep.skipped:
        ok = False
    _CRITERIA[number] = (ok, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
