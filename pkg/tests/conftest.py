import numpy as np
import pytest

from sentinel.slide_io import SyntheticSlideConfig, generate_synthetic_slide, open_slide


@pytest.fixture(scope="session")
def tumor_slide(tmp_path_factory):
    root = tmp_path_factory.mktemp("slides")
    cfg = SyntheticSlideConfig(slide_id="t01", size=(480, 480), n_levels=3, tissue_blobs=2,
                               tissue_radius=(70.0, 90.0), tumor_blobs=1, tumor_radius=(30.0, 35.0), seed=11)
    generate_synthetic_slide(cfg, root / "t01")
    return open_slide(root / "t01")


@pytest.fixture(scope="session")
def normal_slide(tmp_path_factory):
    root = tmp_path_factory.mktemp("slides")
    cfg = SyntheticSlideConfig(slide_id="n01", size=(480, 480), n_levels=3, tissue_blobs=2,
                               tissue_radius=(70.0, 90.0), seed=12)
    generate_synthetic_slide(cfg, root / "n01")
    return open_slide(root / "n01")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---- acceptance summary: one line per criterion ----------------------------

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_ac" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
