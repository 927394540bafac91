import numpy as np
import pytest

from i2ptriage import synth
from i2ptriage.cascade import CascadeModel
from i2ptriage.pipeline import RunConfig, train_phase

_criteria = {}
_CRITERION_BY_NODE = {}
_RANK = {None: -1, "PASS": 0, "SKIP": 1, "FAIL": 2}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERION_BY_NODE[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    marker = _CRITERION_BY_NODE.get(report.nodeid)
    if marker is None or (report.when != "call" and report.outcome == "passed"):
        return
    number, name = marker
    outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    if _RANK[outcome] > _RANK[_criteria.get(number, (name, None))[1]]:
        _criteria[number] = (name, outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        name, outcome = _criteria[number]
        terminalreporter.write_line(f"criterion {number} {name}: {outcome}")


@pytest.fixture(scope="session")
def synth_spec():
    return synth.default_spec()


@pytest.fixture(scope="session")
def synth_cascade(synth_spec):
    """A cascade trained on 6,000 default-spec flows, with a small forest for speed."""
    data = synth.generate(synth_spec, 6000, seed=7).dataset
    rc = RunConfig(seed=42, forest={"n_trees": 25})
    p1 = train_phase(data, 1, "forest", rc)
    p2 = train_phase(data, 2, "gbt-xgb", rc)
    return CascadeModel(p1.bundle, p2.bundle, provenance="synth")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
