import pytest

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record(number: int, ok: bool, title: str, detail: str = "") -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
    ACCEPTANCE[number] = line + (f"  ({detail})" if detail else "")
    print(ACCEPTANCE[number])
    return ok


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
