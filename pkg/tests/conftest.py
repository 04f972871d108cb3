import pytest


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "acceptance":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(record_property):
    """Record and print one PASS/FAIL line; returns the boolean for the caller to assert."""

    def _verdict(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {number}: {title} | {detail}"
        record_property("acceptance", line)
        print(line)
        return passed

    return _verdict
