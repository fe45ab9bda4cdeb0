import pathlib

import pytest

DATA_DIR = pathlib.Path(__file__).resolve().parent.parent / "data" / "mnist"

# one line per acceptance criterion, printed after the run (see test_acceptance)
CRITERIA_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist():
    """(train, test) datasets parsed from the vendored IDX files."""
    from rvnn.data import load_mnist

    return load_mnist(DATA_DIR)
