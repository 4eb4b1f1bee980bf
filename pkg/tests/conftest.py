"""Shared pytest plumbing: acceptance criteria report one pass/fail line each."""

import pytest

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome and fail the test if it did not hold."""
    def record(name: str, passed: bool, detail: str = ""):
        _CRITERIA.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        assert passed, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
