import sys
from pathlib import Path

# lets test modules import the shared oracles regardless of rootdir/import mode
sys.path.insert(0, str(Path(__file__).parent))

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
