import numpy as np
import pytest

from icefit.artifacts import generate_truth
from icefit.closures import IsotropicStress, ZERO_RATE
from icefit.config import ExperimentConfig
from icefit.fem import Simulation


@pytest.fixture(scope="session")
def tiny_config():
    return ExperimentConfig(nx=4, ny=2)


@pytest.fixture(scope="session")
def tiny_sim(tiny_config):
    return Simulation(tiny_config)


@pytest.fixture(scope="session")
def tiny_stress(tiny_config):
    return IsotropicStress(tiny_config.glen_params(), tiny_config.damage_params())


@pytest.fixture(scope="session")
def tiny_glen(tiny_sim, tiny_stress):
    out = tiny_sim.solve_forward(tiny_stress, ZERO_RATE)
    assert out.converged
    return out


@pytest.fixture(scope="session")
def small_truth():
    """Truth artifacts on an 8x4 dome; shared by observer/adjoint tests."""
    return generate_truth(ExperimentConfig(nx=8, ny=4))


@pytest.fixture(scope="session")
def small_sim(small_truth):
    return Simulation(small_truth.config)


@pytest.fixture(scope="session")
def small_stress(small_truth):
    cfg = small_truth.config
    return IsotropicStress(cfg.glen_params(), cfg.damage_params())


def random_interior_state(sim, rng, phi_range=(0.05, 0.6)):
    """A constraint-satisfying state with smooth-ish random fields."""
    w = sim.zero_state_vector()
    w[: sim.n_u] = 0.3 * rng.standard_normal(sim.n_u)
    w[sim.off_p : sim.off_phi] = rng.standard_normal(sim.n_p)
    w[sim.off_phi :] = rng.uniform(*phi_range, sim.n_phi)
    return sim.apply_constraints(w)
