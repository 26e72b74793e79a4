import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_ac"):
        return
    if report.when == "call" or report.failed or report.skipped:
        prev = _CRITERIA.get(name)
        _CRITERIA[name] = "FAIL" if report.failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[1][2:])):
        label = name.split("_", 2)
        terminalreporter.write_line(f"{_CRITERIA[name]} {label[1].upper()} {label[2].replace('_', ' ')}")
