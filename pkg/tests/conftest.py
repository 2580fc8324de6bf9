import numpy as np
import pytest

from hypokin.anisotropy import chain_model, kinetic_model
from hypokin.fields import AnisoGrid, gaussian_field
from hypokin.spectral import bandlimit


@pytest.fixture(scope="session")
def kinetic():
    return kinetic_model()


@pytest.fixture(scope="session")
def chain3():
    return chain_model((1, 1, 1))


@pytest.fixture(scope="session")
def grid128(kinetic):
    """Mid-size kinetic grid for solver tests (J_max = 5)."""
    return AnisoGrid.build(kinetic.blocks, [128, 128])


@pytest.fixture(scope="session")
def grid256(kinetic):
    """The desk-scale kinetic grid (J_max = 6)."""
    return AnisoGrid.build(kinetic.blocks, [256, 256])


@pytest.fixture(scope="session")
def grid_widev(kinetic):
    """Wide velocity box: keeps Gaussian tails off the periodic seam."""
    return AnisoGrid.build(kinetic.blocks, [256, 256],
                           half_extents=[2 * np.pi, np.pi ** 3])


@pytest.fixture(scope="session")
def grid_xfine(kinetic):
    """Grid resolving the position annuli up to J_max - 1 (for the
    per-block derivative-gain and mollification-rate fits)."""
    return AnisoGrid.build(kinetic.blocks, [32, 8192],
                           half_extents=[np.pi, np.pi])


def make_density(grid, sigmas):
    u0 = bandlimit(gaussian_field(grid, sigmas))
    return u0 * (1.0 / float(u0.integral()[0]))


@pytest.fixture(scope="session")
def u0_128(grid128):
    return make_density(grid128, [0.6, 1.0])


@pytest.fixture(scope="session")
def u0_256(grid256):
    return make_density(grid256, [0.6, 0.6])
