from contextlib import contextmanager

import numpy as np
import pytest

from cdinet.phantom import DatasetConfig, build_dataset, Dataset
from cdinet.tomo import Geometry


SMALL = Geometry(n=32, pixel_size=1.25, n_angles=20, n_limited=9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_geom():
    return SMALL


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight small samples: 4 train / 2 val / 2 test."""
    root = tmp_path_factory.mktemp("tiny") / "ds"
    build_dataset(root, 8, 7, DatasetConfig(geometry=SMALL, split=(0.5, 0.25, 0.25)))
    return Dataset(root)


# ------------------------------------------------------------ acceptance

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion as PASS/FAIL.

    The body may put a short ``summary`` string into the yielded dict; a
    criterion fails when the body raises (including assertion errors).
    """

    @contextmanager
    def record(number, title):
        info = {"summary": ""}
        try:
            yield info
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _CRITERIA[number] = ("FAIL", title, msg[:160])
            print(f"criterion {number}: FAIL - {title} - {msg[:160]}")
            raise
        _CRITERIA[number] = ("PASS", title, info["summary"])
        print(f"criterion {number}: PASS - {title} - {info['summary']}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, summary = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status} - {title} - {summary}")
