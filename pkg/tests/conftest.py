import pytest

from iespsoc import model

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def params():
    return model.DEFAULT_PARAMS


@pytest.fixture(scope="session")
def curves():
    return model.default_curves()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
