"""Collects the acceptance suite's outcomes and prints one line per criterion."""
import re

_RESULTS: dict[int, tuple[str, str, str]] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("detail", "")
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _RESULTS[int(m.group(1))] = (m.group(2).replace("_", " "), outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_RESULTS):
        title, outcome, detail = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d} {outcome}  {title}: {detail}")
