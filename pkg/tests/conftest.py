"""
Shared fixtures and the --runslow switch for full-size preset runs.
"""
import numpy as np
import pytest

from models.fields import Coupling, GridSpec, PhysicalConstants
from utils.initial_states import cosine, gaussian


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size preset tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def constants():
    return PhysicalConstants()


@pytest.fixture
def wide_grid():
    """128 nodes on [-4π, 4π): room for a unit-width Gaussian."""
    return GridSpec(extent=((-4 * np.pi, 4 * np.pi),), points=(128,))


@pytest.fixture
def ring_grid():
    """64 nodes on [0, 2π)."""
    return GridSpec(extent=((0.0, 2 * np.pi),), points=(64,))


@pytest.fixture
def square_grid():
    return GridSpec.uniform(0.0, 2 * np.pi, 32, dim=2)


@pytest.fixture
def gaussian_state(wide_grid):
    return gaussian(wide_grid, x0=0.0, sigma=1.0, k0=0.0)


@pytest.fixture
def nodeless_state(ring_grid):
    """(1 + 0.5 cos x)e^{ix}: |ψ| stays away from zero for all times."""
    return cosine(ring_grid, amplitude=0.5, mode=1, k_mode=1)


@pytest.fixture
def hermitian():
    return Coupling.single(0.0, 0.0)
