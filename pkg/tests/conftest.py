"""Prints the acceptance verdicts after the run, even under output capture."""

VERDICTS: dict[int, str] = {}


def record(k: int, ok: bool, detail: str, seconds: float):
    VERDICTS[k] = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}"
    print(VERDICTS[k])


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])
