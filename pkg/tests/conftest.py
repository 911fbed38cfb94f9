import pytest

CRITERIA = []


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` prints one PASS/FAIL line and keeps it for the session summary."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(CRITERIA):
            terminalreporter.write_line(line)
