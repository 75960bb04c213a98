import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the release-gate verdict lines after capture has ended."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
