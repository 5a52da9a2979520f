"""Shared pytest hooks: a one-line verdict per acceptance criterion."""

from collections import defaultdict

_verdicts = defaultdict(list)
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): test backing one acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _titles[number] = title
            item.user_properties.append(("criterion", number))


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    _verdicts[criterion].append((report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_titles):
        results = _verdicts.get(number, [])
        if not results:
            verdict = "NOT RUN"
        elif all(outcome in ("passed", "skipped") for outcome, _ in results):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        seconds = sum(d for _, d in results)
        terminalreporter.write_line(f"criterion {number:>2}: {verdict:<7} {_titles[number]} ({seconds:.1f}s)")
