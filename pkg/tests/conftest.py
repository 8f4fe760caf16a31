import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(criterion, passed, detail)``."""
    def add(name, passed, detail=""):
        _LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
