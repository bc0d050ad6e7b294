import pytest

# acceptance tests append (number, passed, detail) here
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES.append((number, passed, detail))
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}")
