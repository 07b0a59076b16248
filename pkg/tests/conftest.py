"""Terminal summary listing one pass/fail line per acceptance criterion."""

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid:
        if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
            _acceptance[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for nodeid in sorted(_acceptance):
        outcome = _acceptance[nodeid]
        word = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"[{word}] {nodeid.split('::', 1)[1]}")
