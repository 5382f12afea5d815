try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np
import pytest

from measure_core import Density, Grid

ROOT = Path(__file__).resolve().parent


@pytest.fixture(scope='session')
def baseline():
    with open(ROOT / 'configs' / 'baseline.toml', 'rb') as handle:
        return tomllib.load(handle)


@pytest.fixture
def line_grid():
    return Grid(1, (0.0,), (0.25,), (5,))


@pytest.fixture
def uniform_density(line_grid):
    return Density(line_grid, np.full(5, 0.8))


@pytest.fixture
def step_density(line_grid):
    return Density(line_grid, [0.0, 0.0, 0.0, 2.0, 2.0])


@pytest.fixture
def gaussian_1d():
    """N(0, 1) on [-8, 8] with spacing 0.02"""
    grid = Grid.centered(1, 8.0, 801)
    x = grid.axes()[0]
    return Density.normalized(grid, np.exp(-0.5 * x * x))
