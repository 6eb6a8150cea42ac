import os

# single-threaded BLAS so timings and float reductions are reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402

_VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    state = "PASS" if report.passed else "FAIL"
    # a criterion split over several tests fails if any part fails
    if _VERDICTS.get(n, ("PASS", ""))[0] == "FAIL":
        return
    _VERDICTS[n] = (state, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        state, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {state}  {detail}")
