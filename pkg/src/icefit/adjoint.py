"""Discrete-adjoint gradient of observer losses through the forward solve.

The converged state is treated as the exact root of F(w; theta) = 0, so

    dL/dtheta = -lambda^T dF/dtheta,     J(w)^T lambda = dL/dw.

The closure parameters only enter the damage equation through the pointwise
rate s at quadrature points (Galerkin and streamline-upwind terms), so
dF/dtheta reduces to per-point cotangents pushed through the closure's own
parameter gradient.  A forward (tangent) variant of the same linearization is
provided for cross-checking the adjoint in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .closures import IsotropicStress, RateModel
from .errors import ContractViolation
from .fem import Simulation, SolveOutcome
from .observers import LossSpec, ObservationSet, experimental_loss


@dataclass
class GradientResult:
    loss: float
    gradient: np.ndarray | None
    outcome: SolveOutcome
    solved: bool


def _rate_cotangent_weights(sim: Simulation, w_eff):
    """Per-quadrature-point weight of the rate in the damage residual.

    Row i of the damage block reads  -(N1_i + delta_h u.grad N1_i) * s * wdet
    summed over points; returns the (nc, nq, 3) pairing tensor and the cell
    dof map, so that lambda-contractions and dF/dtheta products share it.
    """
    u_nodes = w_eff[: sim.n_u].reshape(sim.n_p2, 2)
    u_loc = u_nodes[sim.cell_p2]
    u_qp = np.einsum("cai,qa->cqi", u_loc, sim.N2)
    delta, _ = sim._supg_delta(u_qp)
    u_dot_g1 = np.einsum("cqi,cai->cqa", u_qp, sim.grad1)
    pair = sim.N1[None, :, :] + delta[:, None, None] * u_dot_g1  # (nc, nq, 3)
    return pair


def loss_gradient(
    sim: Simulation,
    stress: IsotropicStress,
    rate: RateModel,
    spec: LossSpec,
    obs: ObservationSet,
    initial_guess=None,
    continuation: bool = False,
    outcome: SolveOutcome | None = None,
) -> GradientResult:
    """Loss and its exact gradient with respect to the rate parameters.

    A converged ``outcome`` for the same parameters may be passed to skip the
    forward solve.  On a failed forward solve, returns the sentinel loss with
    no gradient (the optimizer's adapter treats that as an infeasible trial
    point).
    """
    if outcome is None:
        outcome = sim.solve_forward(
            stress, rate, initial_guess=initial_guess, continuation=continuation
        )
    if not outcome.converged:
        return GradientResult(spec.failed_solve_loss, None, outcome, False)
    w = sim.apply_constraints(sim.state_to_vector(outcome.state))
    loss, dl_dw = experimental_loss(
        sim, outcome.state, obs, spec, with_gradient=True
    )
    if rate.n_params == 0:
        return GradientResult(loss, np.zeros(0), outcome, True)

    K = sim.assemble_jacobian(w, stress, rate)
    lam = spla.splu(K.tocsc()).solve(dl_dw, trans="T")

    pair = _rate_cotangent_weights(sim, w)
    lam_phi = lam[sim.cell_phidofs]  # (nc, 3)
    # lambda^T dF/ds at each quadrature point; dF_i/ds = -pair_i * wdet
    lam_ds = -np.einsum("ca,cqa,cq->cq", lam_phi, pair, sim.wdet)
    j1, j2, phi = sim.strain_invariants(w)
    grad = -rate.param_gradient(j2.ravel(), phi.ravel(), lam_ds.ravel())
    return GradientResult(loss, grad, outcome, True)


def forward_sensitivity_probe(
    sim: Simulation,
    stress: IsotropicStress,
    rate: RateModel,
    spec: LossSpec,
    obs: ObservationSet,
    direction,
    initial_guess=None,
) -> float:
    """Tangent-mode directional derivative of the loss (test utility).

    Solves J w_dot = -(dF/dtheta) direction at the converged state and
    returns dL/dw . w_dot; agrees with the adjoint gradient dotted with the
    direction.
    """
    direction = np.asarray(direction, dtype=float)
    outcome = sim.solve_forward(stress, rate, initial_guess=initial_guess)
    if not outcome.converged:
        raise ContractViolation("sensitivity probe requires a converged solve")
    w = sim.apply_constraints(sim.state_to_vector(outcome.state))
    loss, dl_dw = experimental_loss(
        sim, outcome.state, obs, spec, with_gradient=True
    )
    if not direction.size:
        return 0.0
    j1, j2, phi = sim.strain_invariants(w)
    s_dot = rate.param_jvp(j2.ravel(), phi.ravel(), direction).reshape(j2.shape)
    pair = _rate_cotangent_weights(sim, w)
    rhs_phi = -np.einsum("cqa,cq,cq->ca", pair, sim.wdet, s_dot)
    rhs = np.zeros(sim.n_dof)
    np.add.at(rhs, sim.cell_phidofs.ravel(), rhs_phi.ravel())
    rhs[sim.constraint_idx] = 0.0
    K = sim.assemble_jacobian(w, stress, rate)
    w_dot = spla.splu(K.tocsc()).solve(-rhs)
    return float(dl_dw @ w_dot)
