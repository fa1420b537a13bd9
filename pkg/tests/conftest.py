import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the terminal summary prints them in order."""

    def record(num, ok, detail):
        VERDICTS[num] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(VERDICTS):
        ok, detail = VERDICTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
