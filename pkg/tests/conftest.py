import pytest

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def record():
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
