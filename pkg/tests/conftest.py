"""Collects the one-line verdicts of the acceptance checks and prints them at the end of the run."""

VERDICTS: dict[str, str] = {}


def record(key: str, passed: bool, detail: str) -> None:
    line = f"{key} {'PASS' if passed else 'FAIL'}: {detail}"
    VERDICTS[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])
