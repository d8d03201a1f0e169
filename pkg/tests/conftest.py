import numpy as np
import pytest

from ptvlidar.grids import make_grid
from ptvlidar.simulator import (build_default_instrument, build_default_suite,
                                calibrate_flux, default_grid, make_scene,
                                observe)


@pytest.fixture(scope="session")
def grid():
    return default_grid()


@pytest.fixture(scope="session")
def small_grid():
    # tiny but structurally complete: multiple cells per coarse block
    return make_grid(4, 16, 37.5, 7, 8e9)


@pytest.fixture(scope="session")
def suite(grid):
    return build_default_suite(grid)


@pytest.fixture(scope="session")
def small_suite(small_grid):
    return build_default_suite(small_grid)


@pytest.fixture(scope="session")
def linear_scene(grid):
    return make_scene("linear_lapse", grid, seed=0)


@pytest.fixture(scope="session")
def instrument(grid, suite, linear_scene):
    return calibrate_flux(linear_scene, build_default_instrument(grid),
                          suite, grid)


@pytest.fixture(scope="session")
def observations(grid, suite, linear_scene, instrument):
    return observe(linear_scene, instrument, suite, grid, seed=1)


def surface_series(grid, scene):
    return (np.full(grid.n_time, scene.T_surface),
            np.full(grid.n_time, scene.P_surface))
