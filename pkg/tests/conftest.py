import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Emit the FAIL half of the acceptance suite's per-criterion lines."""
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed:
        print(f"\ncriterion {marker.args[0]}: FAIL - see traceback")
