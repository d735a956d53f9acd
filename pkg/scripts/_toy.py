"""Shared toy setup for the experiment scripts: 64x64 grid, 32 detectors, 48 energy bins."""

import numpy as np

from ncccst.geometry import ComptonSpec, SystemGeometry, build_energy_grid
from ncccst.operator import ImageGrid, assemble
from ncccst.simulate import NoiseSpec, build_dataset

TOY_DELTA_E = 0.003375


def toy_operator(size: int = 64, k: int = 32):
    grid = build_energy_grid(ComptonSpec(0.3), TOY_DELTA_E)
    return assemble(SystemGeometry(1.0, k), grid, ImageGrid(size, size))


def toy_dataset(A, n_train=200, n_val=10, n_test=20, seed=0):
    return build_dataset(A, n_train, n_val, seed=seed, noise=NoiseSpec(), n_test=n_test)


def fmt(x: float) -> str:
    return f"{x:.3f}" if np.isfinite(x) else str(x)
