import time

import pytest

from bbfcn.experiment import ExperimentConfig, run_experiment

CRITERIA: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    line = f"{status} [{marker.args[0]:>2}] {marker.args[1]}"
    CRITERIA.append(line + (f": {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the criterion report."""
    return lambda text: record_property("detail", text)


def _timed_run(out_dir):
    t = time.perf_counter()
    result = run_experiment(ExperimentConfig(), out_dir)
    return result, time.perf_counter() - t


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """The full synthetic experiment, trained once per session."""
    return _timed_run(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="session")
def experiment_repeat(tmp_path_factory, experiment):
    return _timed_run(tmp_path_factory.mktemp("run_b"))
