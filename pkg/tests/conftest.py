import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, passed, detail)``."""
    lines = request.config.stash.setdefault(_RESULTS, [])

    def record(number: int, passed: bool, detail: str) -> bool:
        lines.append((number, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, passed, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
