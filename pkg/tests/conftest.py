import time

import pytest

from canopy_uq.pipeline import run_synthetic

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" [{detail}]" if detail else "")
        _VERDICTS.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs the trained synthetic ensembles (several minutes)")


def pytest_collection_modifyitems(items):
    for item in items:
        if "synthetic_runs" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synthetic_runs():
    """Unweighted and density-weighted cross-validated ensembles on the default
    synthetic scene, keyed by ``weighted``, with wall-clock seconds.

    Several minutes each on one CPU core; shared by every test that needs a
    trained model.
    """
    out = {}
    for weighted in (False, True):
        start = time.perf_counter()
        run = run_synthetic(seed=0, weighted=weighted)
        out[weighted] = (run, time.perf_counter() - start)
    return out
