import pytest

_criteria: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion; also asserts it."""

    def record(number: int, ok: bool, detail: str):
        _criteria[number] = (bool(ok), detail)
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
