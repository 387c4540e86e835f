import numpy as np
import pytest

from chac.forward import SolverConfig, StateVec
from chac.grid import PeriodicGrid, ScalarField
from chac.potentials import CouplingSeries, PotentialSeries, SystemParams, double_well_potential


@pytest.fixture
def grid():
    return PeriodicGrid(1, 128)


@pytest.fixture
def grid2d():
    return PeriodicGrid(2, 64)


@pytest.fixture
def params():
    return SystemParams(c1=1.0, c2=1.0)


@pytest.fixture
def double_well():
    return double_well_potential()


@pytest.fixture
def linear_coupling():
    # f0 = z0, f1 = 0.5 z1
    return CouplingSeries.linear(1.0, (0.5, 0.0, 0.0))


@pytest.fixture
def mixed_potential():
    """Asymmetric cubic potential with quadratic term (breaks odd symmetry)."""
    return PotentialSeries(order=3, coefficients={1: -1.0, 2: 2.0, 3: 6.0})


@pytest.fixture
def cross_coupling():
    """Couplings exercising the z0*z1 interaction paths."""
    return CouplingSeries(
        order=2,
        f0_coefficients={(1, 0, 0, 0): 1.0, (1, 1, 0, 0): 0.8},
        diagonal={1: 0.5},
        fi_coefficients={1: {(1, 1, 0, 0): 1.0}},
    )


def make_state(grid, u0, u1=None, u2=None, u3=None):
    fields = [ScalarField(grid, np.asarray(u0, dtype=float))]
    for extra in (u1, u2, u3):
        if extra is None:
            fields.append(ScalarField.zeros(grid))
        else:
            fields.append(ScalarField(grid, np.asarray(extra, dtype=float)))
    return StateVec(*fields)


@pytest.fixture
def state_factory():
    return make_state
