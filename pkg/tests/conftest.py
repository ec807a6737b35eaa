import pytest

_VERDICTS = {}


@pytest.fixture
def criterion():
    """Record ``(number, title, passed, detail)`` for the acceptance summary."""

    def record(number, title, passed, detail=""):
        line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _VERDICTS[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])
