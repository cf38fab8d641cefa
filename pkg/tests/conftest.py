import re

import pytest

_ACCEPTANCE: list[str] = []


def _order(line: str):
    num, sub = re.match(r"criterion (\d+)(\w*)", line).groups()
    return int(num), sub


@pytest.fixture
def verdict():
    """Record and print one ``criterion N: PASS|FAIL`` line."""

    def record(number, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE, key=_order):
            terminalreporter.write_line(line)
