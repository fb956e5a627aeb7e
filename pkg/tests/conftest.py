import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hdrdim.display import BacklightLayout, DisplayConfig, Psf, gaussian_kernel, normalize_psf, segment_psf  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_display(h=32, w=32, rows=3, cols=3, peak=4000.0, leak=0.001, sigma=None, size=None,
                  boundary="zero"):
    lay = BacklightLayout(rows, cols, h, w, peak)
    sigma = 0.6 * lay.pitch if sigma is None else sigma
    return DisplayConfig(lay, normalize_psf(gaussian_kernel(sigma, size), lay, peak, boundary),
                         leak, peak, boundary)


def delta_display(h, w, rows, cols, peak=4000.0, leak=0.0):
    """Identity PSF with unit gain."""
    lay = BacklightLayout(rows, cols, h, w, peak)
    return DisplayConfig(lay, Psf.delta(1.0), leak, peak)


def segment_display(h, w, rows, cols, peak=4000.0, leak=0.0):
    """Each LED lights its own segment at unit gain."""
    lay = BacklightLayout(rows, cols, h, w, peak)
    return DisplayConfig(lay, segment_psf(lay), leak, peak)


# ----------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion at the end of the run

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and report.passed
    if report.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        notes = f"  ({', '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number} {e['title']}: {'PASS' if e['ok'] else 'FAIL'}{notes}")
