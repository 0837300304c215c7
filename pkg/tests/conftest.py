import pytest

_LINES = {}


@pytest.fixture
def criterion():
    """``criterion(number, ok, detail)`` records and prints one acceptance line."""

    def report(number, ok, detail):
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
        _LINES[number] = line
        print(line)

    return report


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance-criterion checks")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
