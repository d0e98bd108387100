from contextlib import contextmanager

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Context manager that records PASS/FAIL for a numbered acceptance criterion."""

    @contextmanager
    def run(number, title):
        notes = []
        try:
            yield notes
        except BaseException:
            _RESULTS[number] = ("FAIL", title, notes)
            raise
        _RESULTS[number] = ("PASS", title, notes)

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, notes = _RESULTS[number]
        detail = f" ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {number}: {status} {title}{detail}")
