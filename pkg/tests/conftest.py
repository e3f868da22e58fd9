import pytest

_ACCEPTANCE = {}


class _Recorder:
    def __init__(self):
        self.lines = _ACCEPTANCE

    def __call__(self, number, passed, detail):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        self.lines[number] = line
        print(line)
        return passed


@pytest.fixture
def record():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
