import pytest

_KEY = "beamdip_criteria"


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the end-of-run criterion table."""
    lines = request.config.__dict__.setdefault(_KEY, {})

    def record(number, passed, detail=""):
        lines[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get(_KEY)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        ok, detail = lines[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
