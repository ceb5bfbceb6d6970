import pytest

_verdicts: list[str] = []


@pytest.fixture
def verdict_log():
    """Collector for acceptance verdict lines, printed after the run."""
    return _verdicts.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts):
            terminalreporter.write_line(line)
