import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_addoption(parser):
    parser.addoption("--skip-acceptance", action="store_true", help="skip the long acceptance runs")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-acceptance"):
        return
    skip = pytest.mark.skip(reason="--skip-acceptance given")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the end-of-run summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 10):
        if number in results:
            passed, detail = results[number]
            terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {number}: NOT RUN (skipped or errored before measuring)")
