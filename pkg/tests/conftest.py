import pytest

# one line per acceptance criterion, echoed again at the end of the session
CRITERIA: list = []


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail, seconds):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail} ({seconds:.1f} s)"
        CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
