import pytest

# one line per acceptance criterion, printed at the end of the session
CRITERIA = {}


@pytest.fixture(scope="session")
def record_criterion():
    def record(number, ok, text, part=""):
        label = f"{number} [{part}]" if part else f"{number}"
        CRITERIA[(number, part)] = f"criterion {label}: {'PASS' if ok else 'FAIL'} - {text}"
        print(CRITERIA[(number, part)])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
