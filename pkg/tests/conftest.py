from pathlib import Path

import pytest

from hashmoe.scene import generate_synthetic

CACHE = Path(__file__).parent / ".cache"


@pytest.fixture(scope="session")
def tiny_scene():
    """8 views at 16x16 of the procedural city (6 train, 2 val)."""
    ds, scene = generate_synthetic(0, n_views=8, resolution=16, val_every=4, fg_samples=128, bg_samples=64,
                                   cache_dir=CACHE)
    return ds


# -- acceptance summary ---------------------------------------------------------------
# tests in test_acceptance.py carry @pytest.mark.criterion("name"); a criterion passes
# when all of its tests pass. Details recorded through the ``criterion_log`` fixture are
# printed next to the verdict.

_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


def _entry(name):
    return _CRITERIA.setdefault(name, {"outcomes": [], "details": []})


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _entry(m.args[0])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _entry(m.args[0])["outcomes"].append(rep.outcome)


@pytest.fixture
def criterion_log(request):
    m = request.node.get_closest_marker("criterion")
    details = _entry(m.args[0])["details"]
    return details.append


def pytest_terminal_summary(terminalreporter):
    if not any(e["outcomes"] for e in _CRITERIA.values()):
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, e in _CRITERIA.items():
        if not e["outcomes"]:
            verdict = "NOT RUN"
        elif all(o == "passed" for o in e["outcomes"]):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        detail = "; ".join(e["details"])
        tr.write_line(f"[{verdict}] {name}" + (f" -- {detail}" if detail else ""))
