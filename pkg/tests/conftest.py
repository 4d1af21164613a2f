import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def record(criterion: int, passed, detail: str) -> str:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"criterion {criterion}: {status}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return line


@pytest.fixture
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
