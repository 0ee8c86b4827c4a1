import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqssl.data import PhantomSpec, build_slice_table, generate_phantom_dataset  # noqa: E402

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: the multi-seed phantom experiment (about 15 min on one core)")


@pytest.fixture(scope="session")
def small_table():
    # 6 patients -> 4/1/1 split; 4 axial slices per volume resampled to 32 px
    vols = generate_phantom_dataset(PhantomSpec(6, (12, 12, 12), 0.1, 0))
    return build_slice_table(vols, 0.3, ["axial"], 32, seed=0)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    # a criterion spread over several tests passes only if all of them pass
    prev = _CRITERIA.get(number)
    if prev is not None and prev[1] != "PASS":
        status = prev[1]
    details = "; ".join(d for d in (prev[2] if prev else "", detail) if d)
    _CRITERIA[number] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"{status} [{number:2d}] {title}"
        terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
