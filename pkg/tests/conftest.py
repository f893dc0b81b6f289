"""Collects acceptance verdicts and prints them after the test session."""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str, gating: bool = True) -> None:
    verdict = ("PASS" if passed else "FAIL") if gating else ("PASS" if passed else "MISS") + " (informational)"
    ACCEPTANCE[number] = (passed or not gating, f"criterion {number}: {verdict} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number][1])
