import time

import pytest

SUITE_BUDGET_S = 20 * 60

_lines: list[tuple[str, bool, str]] = []
_start = time.perf_counter()


class AcceptanceLog:
    def record(self, criterion: str, passed: bool, detail: str) -> bool:
        _lines.append((criterion, bool(passed), detail))
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - _start
    if not _lines:
        return
    ok = elapsed <= SUITE_BUDGET_S
    rows = sorted(_lines, key=lambda r: r[0]) + [("C9 suite time", ok, f"{elapsed:.0f} s (budget {SUITE_BUDGET_S} s)")]
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in rows:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    if not ok:
        terminalreporter._session.exitstatus = 1
