import numpy as np
import pytest
import torch

from rano_response.synthetic import make_census_fixture, make_synthetic_cohort


@pytest.fixture(scope="session")
def census(tmp_path_factory):
    return make_census_fixture(tmp_path_factory.mktemp("census"), seed=0)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    return make_synthetic_cohort(tmp_path_factory.mktemp("small"), n_patients=10, shape=(16, 16, 16), seed=3)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(items):
    for i, item in enumerate(items):
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))
            item.user_properties.append(("budget_s", mark.kwargs.get("budget_s")))
            item.user_properties.append(("order", i))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []) or [])
            if "criterion" not in props or rep.when not in ("call", "setup"):
                continue
            if outcome != "passed" or rep.when == "call":
                lines.append((rep.nodeid, outcome, props, rep.duration))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for nodeid, outcome, props, duration in sorted(lines, key=lambda r: r[2]["order"]):
        budget = f" / budget {props['budget_s']} s" if props.get("budget_s") else ""
        terminalreporter.write_line(f"{word[outcome]:4}  {props['criterion']}  ({duration:.1f} s{budget})")
