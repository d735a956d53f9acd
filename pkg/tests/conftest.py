import numpy as np
import pytest

from ncccst.geometry import ComptonSpec, SystemGeometry, build_energy_grid
from ncccst.operator import ImageGrid, assemble

TOY_DELTA_E = 0.003375  # gives N_E = 48 at E0 = 0.3


@pytest.fixture(scope="session")
def spec():
    return ComptonSpec(0.3)


@pytest.fixture(scope="session")
def small_setup(spec):
    """16x16 grid, 8 detectors, 12 energy bins; cheap enough for dense checks."""
    geom = SystemGeometry(1.0, 8)
    grid = build_energy_grid(spec, (spec.e0 - spec.e_min) / 12.5)
    img = ImageGrid(16, 16, 1.0)
    return geom, grid, img, assemble(geom, grid, img)


@pytest.fixture(scope="session")
def toy_setup(spec):
    geom = SystemGeometry(1.0, 32)
    grid = build_energy_grid(spec, TOY_DELTA_E)
    img = ImageGrid(64, 64, 1.0)
    return geom, grid, img, assemble(geom, grid, img)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
