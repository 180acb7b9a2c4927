import pytest

_ACCEPTANCE = {}


class Criterion:
    """Records one acceptance criterion's outcome for the summary table."""

    def __init__(self, number, name):
        self.number = number
        self.name = name

    def check(self, ok, detail):
        _ACCEPTANCE[self.number] = (self.name, bool(ok), detail)
        print(f"criterion {self.number:2d} {'PASS' if ok else 'FAIL'}: {self.name} ({detail})")
        assert ok, f"criterion {self.number} failed: {detail}"


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:2d}. {'PASS' if ok else 'FAIL'}  {name}: {detail}")
