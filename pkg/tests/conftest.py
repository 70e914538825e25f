"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
