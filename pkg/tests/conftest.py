import pytest

_LINES = []


class _Recorder:
    def __call__(self, number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append((number, line))
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    """Call ``acceptance(n, passed, detail)`` to record one criterion result."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)
