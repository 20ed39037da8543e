import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from helpers import VERDICTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
