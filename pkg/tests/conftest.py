from pathlib import Path

import numpy as np
import pytest

from metaimager.em import EmModel, SceneGrid, default_layouts, random_layout
from metaimager.noise import NoiseKind, NoiseSpec
from metaimager.pipeline import AnnParams, HybridModel, PhysicalParams

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist10k"


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("bundled MNIST subset missing")
    return MNIST_DIR


@pytest.fixture
def em():
    return EmModel()


@pytest.fixture
def small_grid(em):
    lam = em.wavelength
    return SceneGrid(6, 5, pixel_pitch=lam / 2, plane_distance=20 * lam)


@pytest.fixture
def layouts(em):
    return default_layouts(7, em, n_atoms=6)


def make_model(rng, layout_tx, layout_rx, em, grid, m=2, noise=None, hidden=(7, 5), temperature=1.3,
               signal_scale=1.0, hard=False):
    physical = PhysicalParams(rng.normal(0, 1.0, (m, layout_tx.n_atoms)),
                              rng.normal(0, 1.0, (m, layout_rx.n_atoms)), temperature)
    digital = AnnParams.init(rng, [2 * m, *hidden, 10])
    noise = noise or NoiseSpec(NoiseKind.NONE)
    return HybridModel(physical, digital, layout_tx, layout_rx, em, noise, grid, hard=hard,
                       signal_scale=signal_scale)


@pytest.fixture
def model_factory(layouts, em, small_grid):
    tx, rx = layouts

    def build(seed=0, **kw):
        return make_model(np.random.default_rng(seed), tx, rx, em, small_grid, **kw)

    return build


@pytest.fixture
def compact_layout(em):
    lam = em.wavelength
    return random_layout(3, n_atoms=5, aperture_half_width=2 * lam, min_spacing=lam / 3)


CRITERIA_REPORT: list = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_REPORT):
            terminalreporter.write_line(line)
