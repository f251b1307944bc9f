import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One run of the default experiment plan, shared by every test that needs
    the trained model zoo and its attack matrix (about half an hour on one core)."""
    from tfadv.evaluation import ExperimentPlan, run_plan

    return run_plan(ExperimentPlan(tmp_path_factory.mktemp("default_plan")))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
