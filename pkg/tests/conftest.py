"""Shared pytest hooks: acceptance criteria report one verdict line each."""

ACCEPTANCE_LINES: dict[int, str] = {}


def record(n: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}"
    print(ACCEPTANCE_LINES[n])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
