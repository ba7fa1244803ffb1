import numpy as np
import pytest

from rectilab.lab import build_psi_epsilon
from rectilab.setmodels import (
    circle_polyline,
    discretize_curve,
    four_corner_ifs,
    generate_prefractal,
    segment_polyline,
)


@pytest.fixture(scope="session")
def four_corner_depth7():
    return generate_prefractal(four_corner_ifs(), 7)


@pytest.fixture(scope="session")
def four_corner_depth6():
    return generate_prefractal(four_corner_ifs(), 6)


@pytest.fixture(scope="session")
def four_corner_depth8():
    return generate_prefractal(four_corner_ifs(), 8)


@pytest.fixture(scope="session")
def circle_cloud():
    # Radius 0.3 keeps the curve's cells clear of the corner-set cells on
    # coarse grids over the unit square.
    return discretize_curve(circle_polyline((0.5, 0.5), 0.3, 720), 0.005)


@pytest.fixture(scope="session")
def fine_segment():
    return discretize_curve(segment_polyline(), 1e-4)


@pytest.fixture(scope="session")
def psi_eps_005(four_corner_depth7):
    return build_psi_epsilon(four_corner_depth7, 0.05, m=1, seed=1)


@pytest.fixture(scope="session")
def psi_eps_01(four_corner_depth7):
    return build_psi_epsilon(four_corner_depth7, 0.1, m=1, seed=1)


@pytest.fixture(scope="session")
def psi_eps_02(four_corner_depth7):
    return build_psi_epsilon(four_corner_depth7, 0.2, m=1, seed=1)
