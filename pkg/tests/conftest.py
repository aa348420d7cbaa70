from __future__ import annotations

import pytest

_VERDICTS: list[str] = []


class Verdict:
    """Records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str) -> None:
        self.number = number
        self.title = title

    def __call__(self, passed: bool, detail: str) -> bool:
        line = f"[acceptance {self.number}] {'PASS' if passed else 'FAIL'} {self.title}: {detail}"
        print(line)
        _VERDICTS.append(line)
        return passed


@pytest.fixture
def verdict():
    return Verdict


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
