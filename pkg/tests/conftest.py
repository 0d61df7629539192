import pytest
from hypothesis import settings

from vita.numerics import configure_runtime

settings.register_profile("vita", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("vita")


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    configure_runtime(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk experiment")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n][1])
