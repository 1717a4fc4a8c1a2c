import numpy as np
import pytest

from facefactory.generator import GeneratorBackend
from facefactory.latent import LATENT_DIM, LatentW, SemanticDirection
from facefactory.toy import ToyGenerator


@pytest.fixture(scope="session")
def toy():
    return ToyGenerator()


@pytest.fixture(scope="session")
def toy64():
    return ToyGenerator(size=64)


def unit(dim=LATENT_DIM, seed=0):
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def basis(i, dim=LATENT_DIM):
    e = np.zeros(dim)
    e[i] = 1.0
    return e


def direction(name="d", seed=0, layer_range=(0, 18)):
    return SemanticDirection(name, unit(seed=seed), layer_range)


class LinearBackend(GeneratorBackend):
    """A tiny non-toy backend: each pixel is a sigmoid of one latent coordinate."""

    name = "linear"

    def __init__(self, size=4, offset=0.0):
        self.size = size
        self._w_avg = LatentW(np.full((18, 512), offset))

    @property
    def output_size(self):
        return (self.size, self.size)

    @property
    def w_avg(self):
        return self._w_avg

    def map(self, z):
        return LatentW.broadcast(z.values)

    def render(self, w):
        u = w.rows.mean(axis=0)[: self.size * self.size]
        g = 1.0 / (1.0 + np.exp(-u))
        return np.repeat(g.reshape(self.size, self.size, 1), 3, axis=2)


# -- acceptance summary -------------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and report.passed:
        return
    number, title = marker.args
    if report.when == "call" or report.failed:
        _ACCEPTANCE[number] = (title, report.passed, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, secs = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)")
