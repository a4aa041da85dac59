import pytest
from hypothesis import settings

from kdlvision.dataset import SyntheticSpec, generate_synthetic

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, text = marker.args
    measured = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _ACCEPTANCE[number] = (status, text, measured)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, text, measured = _ACCEPTANCE[number]
        line = f"{status} AC{number}: {text}"
        if measured:
            line += f" [{measured}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def benchmark_data(tmp_path_factory):
    """The default synthetic benchmark (10 classes, 150 specimens/class, 64x64, seed 7)."""
    spec = SyntheticSpec()
    assert (spec.num_classes, spec.images_per_class, spec.image_size, spec.seed) == (10, 150, 64, 7)
    return generate_synthetic(spec, tmp_path_factory.mktemp("benchmark"))
