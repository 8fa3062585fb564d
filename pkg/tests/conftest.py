import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""

    def report(number: int, name: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
