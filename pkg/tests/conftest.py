import pytest


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and print it at the end."""
    lines = request.config.__dict__.setdefault("acceptance_lines", [])

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
