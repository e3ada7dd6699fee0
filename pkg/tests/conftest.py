import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
