"""Shared test hooks: the acceptance checks report through verdict(), and
the collected lines are echoed in one block at the end of the run so stdout
capture cannot hide the PASS lines."""

VERDICTS = []


def verdict(num: int, ok: bool, detail: str) -> bool:
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    VERDICTS.append(line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in sorted(set(VERDICTS)):
            terminalreporter.write_line(line)
