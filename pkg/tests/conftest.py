from contextlib import contextmanager

import pytest

_RESULTS: list[tuple[int, str, bool, str]] = []


class _Outcome:
    detail = ""


@contextmanager
def _criterion(number: int, title: str):
    outcome = _Outcome()
    try:
        yield outcome
    except BaseException:
        _RESULTS.append((number, title, False, outcome.detail))
        raise
    _RESULTS.append((number, title, True, outcome.detail))


@pytest.fixture
def criterion():
    """Context manager that records one acceptance line, PASS unless the block raises."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_RESULTS):
        line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
