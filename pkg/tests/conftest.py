"""Collects acceptance verdicts and prints one line per criterion at the end."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, title, ok, detail):
        _VERDICTS[number] = (title, bool(ok), detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
