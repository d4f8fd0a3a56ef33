"""Session fixtures shared across modules plus the acceptance summary printer."""

import pytest

from helpers import overfit_copy_task

_criteria: dict[str, str] = {}


@pytest.fixture(scope="session")
def overfit_plga():
    return overfit_copy_task("plga")


@pytest.fixture(scope="session")
def overfit_sdpa():
    return overfit_copy_task("sdpa")


@pytest.fixture(scope="session")
def plga_ckpt(overfit_plga, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "plga.ckpt"
    overfit_plga.trainer.save(path)
    return path


@pytest.fixture(scope="session")
def sdpa_ckpt(overfit_sdpa, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "sdpa.ckpt"
    overfit_sdpa.trainer.save(path)
    return path


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    rep = outcome.get_result()
    name = marker.args[0]
    if rep.failed:
        _criteria[name] = "FAIL"
    elif rep.when == "call" and _criteria.get(name) != "FAIL":
        _criteria[name] = "PASS" if rep.passed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria.items():
        terminalreporter.write_line(f"{status}  {name}")
