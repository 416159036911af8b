import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qfvs.dataset import generate_synthetic

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bundle():
    """Three short videos; fast enough for end-to-end training in tests."""
    return generate_synthetic(n_videos=3, shots_per_video=60, feature_dim=64, seed=3)


# ---------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL line each, printed after the run
# ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number, title = marker.args
        details = [v for k, v in item.user_properties if k == "detail"]
        _CRITERIA[number] = ("PASS" if report.passed else "FAIL", title, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"{status}  criterion {number:>2}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
