import pytest

from helpers import SMALL
from reforest.terrain import generate_scenario


@pytest.fixture(scope="session")
def small_scenario():
    return generate_scenario(SMALL)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
