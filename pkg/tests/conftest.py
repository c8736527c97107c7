import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

# acceptance verdict lines, filled by test_acceptance and printed at the end
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
