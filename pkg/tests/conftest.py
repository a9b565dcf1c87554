import pytest

VERDICTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> None:
        VERDICTS.append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
