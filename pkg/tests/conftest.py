import numpy as np
import pytest

from hetcache.latents import EditMask, TokenGrid
from hetcache.toydit import ToyDit, ToyDitConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


_criteria = {}


def pytest_runtest_logreport(report):
    number_title = getattr(report, "criterion", None)
    if number_title is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria.setdefault(number_title, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcomes in sorted(_criteria.items()):
        ok = all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}")


def random_grid(shape, seed=0, scale=1.0):
    return TokenGrid(np.random.default_rng(seed).standard_normal(shape) * scale)


def center_mask(frames, height, width, size=2):
    flags = np.zeros((frames, height, width), dtype=bool)
    y0, x0 = (height - size) // 2, (width - size) // 2
    flags[:, y0 : y0 + size, x0 : x0 + size] = True
    return EditMask(flags)


@pytest.fixture
def small_model():
    return ToyDit(ToyDitConfig(channels=16, heads=2, blocks=2, mlp_hidden=32, seed=3), 10)
