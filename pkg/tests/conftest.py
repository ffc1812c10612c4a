"""Shared pytest plumbing: the acceptance-criteria summary block."""

CRITERION_LINES = []


def record_criterion(line: str) -> None:
    """Register one acceptance-criterion verdict for the terminal summary."""
    CRITERION_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERION_LINES:
        terminalreporter.write_line(line)
