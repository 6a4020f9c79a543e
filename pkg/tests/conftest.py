import contextlib

import numpy as np
import pytest

from gridcl import numcore as nc

_CRITERIA: list[str] = []


@pytest.fixture
def f64():
    with nc.precision(np.float64):
        yield


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL/SKIP line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        notes = []
        try:
            yield notes
        except pytest.skip.Exception as exc:
            _CRITERIA.append(f"[SKIP] criterion {number}: {title} ({exc})")
            raise
        except BaseException as exc:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            _CRITERIA.append(f"[FAIL] criterion {number}: {title} -- {first}")
            raise
        detail = f" ({'; '.join(notes)})" if notes else ""
        _CRITERIA.append(f"[PASS] criterion {number}: {title}{detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
