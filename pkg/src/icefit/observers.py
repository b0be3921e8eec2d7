"""Observation operators, synthetic noise, and loss functions.

Three observers turn a simulated state into the quantities a field campaign
could measure: the full interior velocity/pressure misfit, the misfit
restricted to the free surface, and surface plus a narrow vertical borehole
column.  Noise is multiplicative on velocity (zero velocities are measured
exactly) and additive on pressure, scaled by the pressure range.

The direct invariant loss compares a candidate damage-rate closure against
the generating closure on a rectangular grid in (J2, phi) space, split into
the small and large strain-rate regimes at J2 = sqrt(20); it is the
generalization metric, independent of the experiment geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .fem import Simulation, ExperimentState

OBSERVERS = ("interior", "surface", "surface_plus_borehole")
_SQRT20 = float(np.sqrt(20.0))
_SQRT450 = float(np.sqrt(450.0))


@dataclass
class LossSpec:
    observer: str = "interior"
    gamma_u: float = 1.0
    gamma_p: float = 1.0
    failed_solve_loss: float = 1e12

    def __post_init__(self):
        if self.observer not in OBSERVERS:
            raise ContractViolation(f"unknown observer {self.observer!r}")
        if not (self.gamma_u > 0 and self.gamma_p > 0):
            raise ContractViolation("borehole scalings must be positive")


@dataclass
class ObservationSet:
    """Noisy velocity/pressure fields on the ground-truth mesh."""

    u: np.ndarray  # (n_p2, 2)
    p: np.ndarray  # (n_triangles,)
    delta: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "seed": self.seed,
            "u": self.u.tolist(),
            "p": self.p.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationSet":
        return cls(
            u=np.asarray(d["u"], dtype=float),
            p=np.asarray(d["p"], dtype=float),
            delta=float(d["delta"]),
            seed=int(d["seed"]),
        )


def add_noise(truth: ExperimentState, delta: float, seed: int) -> ObservationSet:
    """Perturb a truth state: u <- u (1 + N(0, delta)) per node, p <- p +
    N(0, delta) * range(p) per cell.  Deterministic per seed; velocity draws
    come first, then pressure draws."""
    if delta < 0:
        raise ContractViolation("noise proportion must be nonnegative")
    rng = np.random.default_rng(seed)
    du = rng.normal(0.0, delta, truth.u.shape[0])
    dp = rng.normal(0.0, delta, truth.p.shape[0])
    u_noisy = truth.u * (1.0 + du)[:, None]
    p_range = float(truth.p.max() - truth.p.min())
    p_noisy = truth.p + dp * p_range
    return ObservationSet(u=u_noisy, p=p_noisy, delta=float(delta), seed=int(seed))


def _misfit_cells(sim: Simulation, state, obs, cells, wu=1.0, wp=1.0, grad=None):
    """Quadrature of wu |u-u0|^2 + wp (p-p0)^2 over the given cells.

    When ``grad`` is an (n_dof,) array the derivative with respect to the
    state coefficients is accumulated into it.
    """
    du_nodes = state.u - obs.u
    du_loc = du_nodes[sim.cell_p2[cells]]  # (nc, 6, 2)
    du_qp = np.einsum("cai,qa->cqi", du_loc, sim.N2)
    wdet = sim.wdet[cells]
    dp = state.p[cells] - obs.p[cells]
    val = wu * float(np.einsum("cq,cqi,cqi->", wdet, du_qp, du_qp))
    area = wdet.sum(axis=1)
    val += wp * float((area * dp**2).sum())
    if grad is not None:
        g_u = 2.0 * wu * np.einsum("cq,cqi,qa->cai", wdet, du_qp, sim.N2)
        idx = sim.cell_udofs[cells].ravel()
        np.add.at(grad, idx, g_u.reshape(len(cells), 12).ravel())
        np.add.at(grad, sim.off_p + cells, 2.0 * wp * area * dp)
    return val


def _misfit_surface(sim: Simulation, state, obs, grad=None):
    nodes = sim.top_edge_nodes  # (ne, 3)
    du = (state.u - obs.u)[nodes]  # (ne, 3, 2)
    du_qp = np.einsum("cai,qa->cqi", du, sim.edge_shape)
    wlen = sim.edge_w[None, :] * sim.top_edge_len[:, None]  # (ne, 3qp)
    cells = sim.top_edge_cell
    dp = state.p[cells] - obs.p[cells]
    val = float(np.einsum("cq,cqi,cqi->", wlen, du_qp, du_qp))
    val += float((sim.top_edge_len * dp**2).sum())
    if grad is not None:
        g_u = 2.0 * np.einsum("cq,cqi,qa->cai", wlen, du_qp, sim.edge_shape)
        udofs = np.stack([2 * nodes, 2 * nodes + 1], axis=-1)  # (ne, 3, 2)
        np.add.at(grad, udofs.ravel(), g_u.ravel())
        np.add.at(grad, sim.off_p + cells, 2.0 * sim.top_edge_len * dp)
    return val


def experimental_loss(
    sim: Simulation,
    state: ExperimentState,
    obs: ObservationSet,
    spec: LossSpec,
    with_gradient: bool = False,
):
    """Observer misfit; optionally also d(loss)/d(state coefficients)."""
    if state.u.shape != obs.u.shape or state.p.shape != obs.p.shape:
        raise ContractViolation("state and observations live on different meshes")
    grad = np.zeros(sim.n_dof) if with_gradient else None
    if spec.observer == "interior":
        val = _misfit_cells(
            sim, state, obs, np.arange(sim.mesh.n_triangles), grad=grad
        )
    elif spec.observer == "surface":
        val = _misfit_surface(sim, state, obs, grad=grad)
    else:
        val = _misfit_surface(sim, state, obs, grad=grad)
        val += _misfit_cells(
            sim,
            state,
            obs,
            sim.mesh.borehole_cells,
            wu=spec.gamma_u,
            wp=spec.gamma_p,
            grad=grad,
        )
    if with_gradient:
        return val, grad
    return val


def set_borehole_scalings(sim: Simulation, truth: ExperimentState):
    """Normalize the borehole velocity and pressure terms to unit size.

    gamma_u = 1 / int_B |u0|^2, gamma_p = 1 / int_B p0^2, floored away from
    division by zero; with these, both terms equal 1 at zero prediction.
    """
    cells = sim.mesh.borehole_cells
    u_loc = truth.u[sim.cell_p2[cells]]
    u_qp = np.einsum("cai,qa->cqi", u_loc, sim.N2)
    wdet = sim.wdet[cells]
    int_u = float(np.einsum("cq,cqi,cqi->", wdet, u_qp, u_qp))
    int_p = float((wdet.sum(axis=1) * truth.p[cells] ** 2).sum())
    floor = 1e-30
    return 1.0 / max(int_u, floor), 1.0 / max(int_p, floor)


@dataclass
class InvariantDomainGrid:
    """Cell-centered rectangular grids over (J2, phi), one per regime.

    The default boxes are J2 in [0, sqrt(20)] (small regime) and
    [sqrt(20), sqrt(450)] (large regime), phi in [0, 1]; they extend beyond
    the invariants that occur in the experiment.  ``in_distribution`` marks
    nodes whose grid cell contains at least one observed sample.
    """

    nodes: np.ndarray  # (N, 2) columns (J2, phi)
    weights: np.ndarray  # (N,)
    regime: np.ndarray  # (N,) 0 = small, 1 = large
    shape: tuple  # (n_j2, n_phi) per regime
    bounds: tuple  # ((j2_lo, j2_hi, phi_lo, phi_hi), ...) per regime
    in_distribution: np.ndarray = field(default=None)

    @classmethod
    def default(
        cls,
        n_j2: int = 64,
        n_phi: int = 32,
        j2_split: float = _SQRT20,
        j2_max: float = _SQRT450,
        phi_max: float = 1.0,
    ) -> "InvariantDomainGrid":
        boxes = ((0.0, j2_split, 0.0, phi_max), (j2_split, j2_max, 0.0, phi_max))
        nodes, regime = [], []
        for r, (j_lo, j_hi, p_lo, p_hi) in enumerate(boxes):
            j_centers = j_lo + (np.arange(n_j2) + 0.5) * (j_hi - j_lo) / n_j2
            p_centers = p_lo + (np.arange(n_phi) + 0.5) * (p_hi - p_lo) / n_phi
            jj, pp = np.meshgrid(j_centers, p_centers, indexing="ij")
            nodes.append(np.column_stack([jj.ravel(), pp.ravel()]))
            regime.append(np.full(n_j2 * n_phi, r))
        nodes = np.vstack(nodes)
        grid = cls(
            nodes=nodes,
            weights=np.ones(len(nodes)),
            regime=np.concatenate(regime),
            shape=(n_j2, n_phi),
            bounds=boxes,
        )
        grid.in_distribution = np.zeros(len(nodes), dtype=bool)
        return grid

    def mark_in_distribution(self, j2_samples, phi_samples) -> None:
        """Flag grid nodes whose cell holds at least one (J2, phi) sample."""
        n_j2, n_phi = self.shape
        mask = np.zeros(len(self.nodes), dtype=bool)
        offset = 0
        for r, (j_lo, j_hi, p_lo, p_hi) in enumerate(self.bounds):
            hist, _, _ = np.histogram2d(
                np.asarray(j2_samples),
                np.asarray(phi_samples),
                bins=(n_j2, n_phi),
                range=((j_lo, j_hi), (p_lo, p_hi)),
            )
            mask[offset : offset + n_j2 * n_phi] = (hist > 0).ravel()
            offset += n_j2 * n_phi
        self.in_distribution = mask


def _rate_values(fn, j2, phi):
    values = fn.values if hasattr(fn, "values") else fn
    return np.asarray(values(j2, phi), dtype=float)


def invariant_loss(candidate, truth, grid: InvariantDomainGrid):
    """Weighted squared closure mismatch over the grid; returns (loss, error map).

    ``candidate`` and ``truth`` are rate closures (or plain callables) over
    (J2, phi); the error map is the signed pointwise difference.
    """
    j2, phi = grid.nodes[:, 0], grid.nodes[:, 1]
    diff = _rate_values(candidate, j2, phi) - _rate_values(truth, j2, phi)
    return float((grid.weights * diff**2).sum()), diff


def invariant_rmse(error_map, grid: InvariantDomainGrid, mask=None) -> float:
    """Root-mean-square closure error over (a subset of) the grid nodes."""
    m = np.ones(len(grid.nodes), dtype=bool) if mask is None else mask
    if not m.any():
        return 0.0
    return float(np.sqrt(np.mean(np.asarray(error_map)[m] ** 2)))
