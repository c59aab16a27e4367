import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hetrade import ckks
from hetrade.inference import rotation_steps

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def params():
    return ckks.CkksParams()


@pytest.fixture(scope="session")
def secret_key(params):
    return ckks.keygen(params, np.random.default_rng(1234))


@pytest.fixture(scope="session")
def galois_keys(params, secret_key):
    steps = set(rotation_steps(8)) | {3, params.slot_count - 1}
    return ckks.galois_keygen(params, secret_key, steps, np.random.default_rng(99))


_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, [title, True])
    if report.failed or report.skipped:
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
