import pytest

_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number, name, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
