import numpy as np
import pytest

from icefit.adjoint import forward_sensitivity_probe, loss_gradient
from icefit.closures import ConstantRate
from icefit.network import NetworkRate, mlp_init
from icefit.observers import LossSpec, add_noise


@pytest.fixture(scope="module")
def setup(small_truth, small_sim, small_stress):
    glen_w = small_sim.state_to_vector(small_truth.glen_state)
    obs = add_noise(small_truth.truth_state, 0.0, seed=0)
    net = mlp_init(0, (2, 2, 1), "tanh").scaled(0.2)
    rate = NetworkRate(net, small_truth.scaler)
    return small_sim, small_stress, rate, obs, glen_w


def test_loss_matches_forward_evaluation(setup, small_truth):
    sim, stress, rate, obs, glen_w = setup
    from icefit.observers import experimental_loss

    spec = LossSpec("interior")
    res = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w)
    assert res.solved
    direct = experimental_loss(sim, res.outcome.state, obs, spec)
    assert res.loss == direct


def test_zero_parameter_model_gets_empty_gradient(setup, small_truth):
    sim, stress, _, obs, glen_w = setup
    res = loss_gradient(
        sim, stress, ConstantRate(0.0), LossSpec("interior"), obs,
        initial_guess=glen_w,
    )
    assert res.solved
    assert res.gradient.size == 0


def test_failed_solve_returns_sentinel_without_gradient(setup):
    sim, stress, _, obs, glen_w = setup
    spec = LossSpec("interior")
    res = loss_gradient(
        sim, stress, ConstantRate(1e6), spec, obs, initial_guess=glen_w
    )
    assert not res.solved
    assert res.loss == spec.failed_solve_loss
    assert res.gradient is None


def test_self_consistent_observations_zero_loss_and_gradient(
    small_truth, small_sim, small_stress
):
    # observations generated by the very network being evaluated: the loss
    # is exactly zero, and so is the adjoint gradient
    sim, stress = small_sim, small_stress
    glen_w = sim.state_to_vector(small_truth.glen_state)
    net = mlp_init(3, (2, 2, 1), "tanh").scaled(0.1)
    rate = NetworkRate(net, small_truth.scaler)
    out = sim.solve_forward(stress, rate, initial_guess=glen_w)
    assert out.converged
    obs = add_noise(out.state, 0.0, seed=0)
    res = loss_gradient(
        sim, stress, rate, LossSpec("interior"), obs, initial_guess=glen_w
    )
    assert res.loss == 0.0
    assert np.array_equal(res.gradient, np.zeros_like(res.gradient))


@pytest.mark.parametrize("observer", ["interior", "surface",
                                      "surface_plus_borehole"])
def test_gradient_matches_finite_differences(setup, small_truth, observer):
    sim, stress, rate, obs, glen_w = setup
    spec = LossSpec(
        observer, gamma_u=small_truth.gamma_u, gamma_p=small_truth.gamma_p
    )
    res = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w)
    assert res.solved
    theta0 = rate.get_params()
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(3):
        d = rng.standard_normal(theta0.size)
        d /= np.linalg.norm(d)
        rate.set_params(theta0 + h * d)
        lp = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w).loss
        rate.set_params(theta0 - h * d)
        lm = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w).loss
        rate.set_params(theta0)
        fd = (lp - lm) / (2 * h)
        assert fd == pytest.approx(float(res.gradient @ d), rel=1e-5)


def test_adjoint_tangent_fd_triple_agreement(setup, small_truth):
    sim, stress, rate, obs, glen_w = setup
    spec = LossSpec("interior")
    res = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w)
    theta0 = rate.get_params()
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(3):
        d = rng.standard_normal(theta0.size)
        d /= np.linalg.norm(d)
        adjoint_dir = float(res.gradient @ d)
        tangent = forward_sensitivity_probe(
            sim, stress, rate, spec, obs, d, initial_guess=glen_w
        )
        rate.set_params(theta0 + h * d)
        lp = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w).loss
        rate.set_params(theta0 - h * d)
        lm = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w).loss
        rate.set_params(theta0)
        fd = (lp - lm) / (2 * h)
        # pairwise agreement among the three derivative routes
        assert tangent == pytest.approx(adjoint_dir, rel=1e-9)
        assert fd == pytest.approx(adjoint_dir, rel=1e-5)
        assert fd == pytest.approx(tangent, rel=1e-5)


def test_tangent_probe_zero_direction(setup):
    sim, stress, rate, obs, glen_w = setup
    val = forward_sensitivity_probe(
        sim, stress, rate, LossSpec("interior"), obs,
        np.zeros(rate.n_params), initial_guess=glen_w,
    )
    assert val == 0.0


def test_tangent_probe_linearity(setup):
    sim, stress, rate, obs, glen_w = setup
    spec = LossSpec("interior")
    rng = np.random.default_rng(3)
    d = rng.standard_normal(rate.n_params)
    one = forward_sensitivity_probe(
        sim, stress, rate, spec, obs, d, initial_guess=glen_w
    )
    two = forward_sensitivity_probe(
        sim, stress, rate, spec, obs, 2.0 * d, initial_guess=glen_w
    )
    assert two == pytest.approx(2.0 * one, rel=1e-12)


def test_gradient_reuses_precomputed_outcome(setup):
    sim, stress, rate, obs, glen_w = setup
    spec = LossSpec("interior")
    out = sim.solve_forward(stress, rate, initial_guess=glen_w)
    res_direct = loss_gradient(sim, stress, rate, spec, obs, initial_guess=glen_w)
    res_reused = loss_gradient(sim, stress, rate, spec, obs, outcome=out)
    assert res_reused.loss == res_direct.loss
    assert np.array_equal(res_reused.gradient, res_direct.gradient)
