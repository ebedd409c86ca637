import pytest

_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; call it with (passed, detail)."""

    def record(passed, detail=""):
        name = request.node.name.removeprefix("test_")
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERIA:
        terminalreporter.write_line(line)
