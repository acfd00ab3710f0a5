import re

_CRITERIA: dict[int, tuple[str, str]] = {}
_NODE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _NODE.search(report.nodeid)
    if not m:
        return
    num, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.failed:
        _CRITERIA[num] = (name, "FAIL")
    elif report.when == "call" and num not in _CRITERIA:
        _CRITERIA[num] = (name, "PASS" if report.passed else "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, verdict = _CRITERIA[num]
        terminalreporter.write_line(f"{verdict} criterion {num:2d}: {name}")
