"""Collects the acceptance verdict lines and repeats them at the end of the run."""

import pytest

_VERDICTS = []


class Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title

    def report(self, ok, detail):
        line = f"CRITERION {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
