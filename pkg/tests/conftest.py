import pytest

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """``report(number, passed, detail)`` records one acceptance line and prints it live."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
