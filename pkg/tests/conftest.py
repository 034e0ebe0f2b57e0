import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record a criterion outcome: acceptance(n, passed, detail)."""

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
