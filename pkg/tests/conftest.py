import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)`` and assert ``passed``."""

    def record(number, title, passed, detail):
        _VERDICTS.append((number, title, bool(passed), detail))
        assert passed, f"criterion {number} ({title}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_VERDICTS):
        terminalreporter.write_line(
            f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
