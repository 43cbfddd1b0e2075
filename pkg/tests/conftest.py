from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from rfcal.dataset import Dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture
def blobs():
    """Two noisy 2-D classes, 300 rows."""
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(0.0, 1.0, (150, 2)), rng.normal(1.5, 1.0, (150, 2))])
    y = np.repeat([0, 1], 150)
    return Dataset(X, y, 2)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    entry["ok"] = entry["ok"] and report.passed
    entry["seconds"] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:2d}: {e['title']} ({e['seconds']:.1f}s)")
