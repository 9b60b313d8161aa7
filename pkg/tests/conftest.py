import numpy as np
import pytest

from meshsketch.geometry import normalize_mesh
from meshsketch.primitives import make_cube, make_cylinder, make_icosphere, polka_dot_texture
from meshsketch.sdf import DistanceOracle, SDFFitConfig, fit_neural_sdf


@pytest.fixture(scope="session")
def sphere_mesh():
    return normalize_mesh(make_icosphere(2))


@pytest.fixture(scope="session")
def fine_sphere_mesh():
    return normalize_mesh(make_icosphere(3))


@pytest.fixture(scope="session")
def cube_mesh():
    return normalize_mesh(make_cube(2.0))


@pytest.fixture(scope="session")
def cylinder_mesh():
    return normalize_mesh(make_cylinder(texture=polka_dot_texture()))


@pytest.fixture(scope="session")
def sphere_oracle(sphere_mesh):
    return DistanceOracle(sphere_mesh)


@pytest.fixture(scope="session")
def desk_sdf_config():
    return SDFFitConfig(
        hidden_layers=4, width=128, near_samples=30_000, uniform_samples=8_000,
        steps=1200, batch=2048, plateau_patience=400,
    )


@pytest.fixture(scope="session")
def sphere_field(sphere_mesh, sphere_oracle, desk_sdf_config):
    return fit_neural_sdf(sphere_mesh, sphere_oracle, desk_sdf_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
