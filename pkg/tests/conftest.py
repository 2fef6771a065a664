import pytest

from radt_lab.envs import chain_walk
from radt_lab.mdp import StationaryPolicy
from radt_lab.shifts import ShiftSpec, apply_shift

_ACCEPTANCE: dict[int, tuple[str, str, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = [str(v) for k, v in report.user_properties if k == "detail"]
        _ACCEPTANCE[number] = (title, "PASS" if report.outcome == "passed" else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict, details = _ACCEPTANCE[number]
        line = f"[{verdict}] criterion {number}: {title}"
        if details:
            line += " (" + "; ".join(details) + ")"
        terminalreporter.write_line(line)


@pytest.fixture
def chain():
    return chain_walk()


@pytest.fixture
def chain_pair(chain):
    return chain, apply_shift(chain, ShiftSpec("transition_perturb", 0.5, seed=0))


@pytest.fixture
def uniform(chain):
    return StationaryPolicy.uniform(chain)
