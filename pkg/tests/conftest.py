import numpy as np
import pytest

from crosspnp.mesh import TriMesh
from crosspnp.model import BoundaryData, ImmobileProfile, SpeciesSystem
from crosspnp.scenarios import ScenarioConfig, TimeGrid


def make_acute_pair():
    """Two acute isoceles triangles sharing one edge; TPFA-admissible."""
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.9], [0.5, -0.9]])
    tris = np.array([[0, 1, 2], [1, 0, 3]])
    tags = [(0, 2, "N"), (1, 2, "N"), (0, 3, "N"), (1, 3, "N")]
    return TriMesh(pts, tris, tags)


def make_right_pair():
    """Two right triangles sharing their hypotenuse; coincident dual
    points, so the two-point flux construction is invalid."""
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    tags = [(0, 1, "N"), (1, 2, "N"), (2, 3, "N"), (3, 0, "N")]
    return TriMesh(pts, tris, tags)


def make_small_scenario(system, initial_value=0.2):
    """Closed-box scenario (no contacts) with constant initial data."""
    n = system.n

    def initial(points):
        return np.full((len(points), n), initial_value)

    return ScenarioConfig(
        name="toy", system=system,
        immobile=ImmobileProfile(density=lambda p: np.zeros(len(p))),
        boundary=BoundaryData(regions={}),
        initial=initial, time=TimeGrid(tau=1e-2, num_steps=5))


@pytest.fixture
def acute_pair():
    return make_acute_pair()


@pytest.fixture
def right_pair():
    return make_right_pair()


@pytest.fixture
def two_species():
    return SpeciesSystem(z=(1.0, -1.0), D=(1.0, 1.3), beta=1.0,
                         lambda2=1.0)
