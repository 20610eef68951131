import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def _criterion_key(line: str):
    tag = line.split()[2].rstrip(":")
    digits = "".join(c for c in tag if c.isdigit())
    return int(digits), tag


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=_criterion_key):
            terminalreporter.write_line(line)
