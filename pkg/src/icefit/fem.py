r"""Mixed finite-element discretization of the coupled flow/damage system.

Unknowns on a triangulated dome cross-section:

* velocity ``u``: continuous piecewise quadratic vector field (P2),
* pressure ``p``: piecewise constant (P0),
* damage ``phi``: continuous piecewise linear (P1).

The discrete residual stacks three weak equations over all test functions::

    (grad v, tau) - (div v, p) - (v, rho g)              tau = stress closure
    (q, div u)
    (psi, u . grad phi) + (grad psi, xi grad phi + delta_h R u) - (psi, s)

with ``s`` the pointwise damage-rate closure and ``R = u . grad phi - s`` the
strong residual of the damage equation (the second derivative vanishes on
affine P1 elements).  The streamline-upwind coefficient is
``delta_h = c_supg * h_cell / (2 ||u||_cell + eps_vel)`` with a smoothed
cell-RMS velocity norm so the Jacobian stays exact near zero velocity.

Dirichlet constraints (no-slip bed, symmetry plane, zero surface damage) are
imposed by lifting: interior equations are assembled from the constrained
state, constrained rows carry the constraint residual, and the Jacobian gets
matching identity rows and zero columns, so it is the exact derivative of the
residual everywhere.  The nonlinear system is solved by damped Newton with a
sparse direct factorization; failures are reported in the outcome, never
raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .closures import IsotropicStress, RateModel
from .config import ExperimentConfig
from .errors import ContractViolation
from .mesh import (
    DMG_DIRICHLET,
    VEL_NOSLIP,
    VEL_SYMMETRY,
    DomeMesh,
    build_dome_mesh,
)

_SQRT20 = np.sqrt(20.0)

# Symmetric triangle quadrature rules on the reference element
# (0,0)-(1,0)-(0,1); weights sum to the reference area 1/2.
_TRI_RULES = {}


def _register_rule(order, points, weights):
    _TRI_RULES[order] = (np.asarray(points, dtype=float), np.asarray(weights) * 0.5)


_register_rule(1, [(1 / 3, 1 / 3)], [1.0])
_register_rule(
    2, [(1 / 6, 1 / 6), (2 / 3, 1 / 6), (1 / 6, 2 / 3)], [1 / 3, 1 / 3, 1 / 3]
)
_a1, _w1 = 0.445948490915965, 0.223381589678011
_a2, _w2 = 0.091576213509771, 0.109951743655322
_register_rule(
    4,
    [
        (_a1, _a1),
        (1 - 2 * _a1, _a1),
        (_a1, 1 - 2 * _a1),
        (_a2, _a2),
        (1 - 2 * _a2, _a2),
        (_a2, 1 - 2 * _a2),
    ],
    [_w1, _w1, _w1, _w2, _w2, _w2],
)
_b1, _v1 = 0.470142064105115, 0.132394152788506
_b2, _v2 = 0.101286507323456, 0.125939180544827
_register_rule(
    5,
    [
        (1 / 3, 1 / 3),
        (_b1, _b1),
        (1 - 2 * _b1, _b1),
        (_b1, 1 - 2 * _b1),
        (_b2, _b2),
        (1 - 2 * _b2, _b2),
        (_b2, 1 - 2 * _b2),
    ],
    [0.225, _v1, _v1, _v1, _v2, _v2, _v2],
)

# 3-point Gauss rule on [0, 1] for edge integrals of quadratic traces.
_EDGE_T = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
_EDGE_W = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


def triangle_rule(order: int):
    exact = [k for k in _TRI_RULES if k >= order]
    key = min(exact) if exact else max(_TRI_RULES)
    return _TRI_RULES[key]


def _p2_shape(xi, eta):
    l1, l2, l3 = 1.0 - xi - eta, xi, eta
    return np.array(
        [
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            l3 * (2 * l3 - 1),
            4 * l1 * l2,
            4 * l2 * l3,
            4 * l3 * l1,
        ]
    )


def _p2_grad_ref(xi, eta):
    l1, l2, l3 = 1.0 - xi - eta, xi, eta
    d1, d2, d3 = np.array([-1.0, -1.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
    return np.array(
        [
            (4 * l1 - 1) * d1,
            (4 * l2 - 1) * d2,
            (4 * l3 - 1) * d3,
            4 * (l2 * d1 + l1 * d2),
            4 * (l3 * d2 + l2 * d3),
            4 * (l1 * d3 + l3 * d1),
        ]
    )


def _p1_shape(xi, eta):
    return np.array([1.0 - xi - eta, xi, eta])


_P1_GRAD_REF = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass
class ExperimentState:
    """Nodal coefficients of one discrete solution."""

    u: np.ndarray  # (n_p2_nodes, 2)
    p: np.ndarray  # (n_triangles,)
    phi: np.ndarray  # (n_vertices,)

    def copy(self) -> "ExperimentState":
        return ExperimentState(self.u.copy(), self.p.copy(), self.phi.copy())


FAILURE_NONE = "none"
FAILURE_DIVERGED = "diverged"
FAILURE_SINGULAR = "singular_jacobian"
FAILURE_STALL = "residual_stall"


@dataclass
class SolveOutcome:
    state: ExperimentState | None
    converged: bool
    relative_residual: float
    newton_iterations: int
    failure_kind: str = FAILURE_NONE


class Simulation:
    """Geometry, spaces, and assembly for one experiment configuration."""

    def __init__(
        self,
        config: ExperimentConfig,
        mesh: DomeMesh | None = None,
        pin_pressure: bool = False,
    ):
        self.config = config
        self.mesh = mesh if mesh is not None else build_dome_mesh(
            config.nx,
            config.ny,
            length=config.length,
            thickness=config.thickness,
            margin_fraction=config.margin_fraction,
        )
        self._build_spaces()
        self._build_quadrature()
        self._build_constraints(pin_pressure)
        self._gravity_load = None

    # -- spaces ----------------------------------------------------------

    def _build_spaces(self):
        mesh = self.mesh
        tris = mesh.triangles
        edge_ids = {}
        cell_p2 = np.zeros((mesh.n_triangles, 6), dtype=int)
        local_pairs = ((0, 1), (1, 2), (2, 0))
        for c, tri in enumerate(tris):
            cell_p2[c, :3] = tri
            for k, (a, b) in enumerate(local_pairs):
                key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                if key not in edge_ids:
                    edge_ids[key] = len(edge_ids)
                cell_p2[c, 3 + k] = mesh.n_vertices + edge_ids[key]
        self.cell_p2 = cell_p2
        self.n_p2 = mesh.n_vertices + len(edge_ids)
        coords = np.zeros((self.n_p2, 2))
        coords[: mesh.n_vertices] = mesh.vertices
        for (a, b), e in edge_ids.items():
            coords[mesh.n_vertices + e] = 0.5 * (
                mesh.vertices[a] + mesh.vertices[b]
            )
        self.p2_coords = coords
        self._edge_ids = edge_ids

        self.n_u = 2 * self.n_p2
        self.n_p = mesh.n_triangles
        self.n_phi = mesh.n_vertices
        self.off_p = self.n_u
        self.off_phi = self.n_u + self.n_p
        self.n_dof = self.n_u + self.n_p + self.n_phi

        # interleaved u dofs per cell, (nc, 12), ordering (node, component)
        ud = np.zeros((mesh.n_triangles, 12), dtype=int)
        ud[:, 0::2] = 2 * cell_p2
        ud[:, 1::2] = 2 * cell_p2 + 1
        self.cell_udofs = ud
        self.cell_phidofs = self.off_phi + tris

    def p2_node_of_edge(self, v0: int, v1: int) -> int:
        return self.mesh.n_vertices + self._edge_ids[(min(v0, v1), max(v0, v1))]

    # -- quadrature ------------------------------------------------------

    def _build_quadrature(self):
        mesh = self.mesh
        pts, wts = triangle_rule(self.config.quad_order)
        self.nq = len(wts)
        self.N2 = np.array([_p2_shape(x, e) for x, e in pts])  # (nq, 6)
        self.N1 = np.array([_p1_shape(x, e) for x, e in pts])  # (nq, 3)
        g2_ref = np.array([_p2_grad_ref(x, e) for x, e in pts])  # (nq, 6, 2)

        verts = mesh.vertices[mesh.triangles]  # (nc, 3, 2)
        jac = np.stack(
            [verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=-1
        )  # (nc, 2, 2), columns are the edge vectors
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            raise ContractViolation("mesh contains degenerate or inverted cells")
        inv_t = (
            np.stack(
                [
                    np.stack([jac[:, 1, 1], -jac[:, 1, 0]], axis=-1),
                    np.stack([-jac[:, 0, 1], jac[:, 0, 0]], axis=-1),
                ],
                axis=1,
            )
            / det[:, None, None]
        )  # inverse transpose of jac
        self.grad2 = np.einsum("qak,cjk->cqaj", g2_ref, inv_t)  # (nc, nq, 6, 2)
        self.grad1 = np.einsum("ak,cjk->caj", _P1_GRAD_REF, inv_t)  # (nc, 3, 2)
        self.wdet = wts[None, :] * det[:, None]  # (nc, nq)
        self.qp_xy = np.einsum("cad,qa->cqd", verts, self.N1)  # (nc, nq, 2)

        edges = verts - np.roll(verts, shift=1, axis=1)
        self.h_cell = np.sqrt((edges**2).sum(-1)).max(axis=1)
        self.cell_area = 0.5 * det

        # top-surface edge quadrature (for the surface observer)
        top = np.flatnonzero(mesh.edge_is_top)
        self.top_edges = top
        if top.size:
            va = mesh.boundary_edges[top, 0]
            vb = mesh.boundary_edges[top, 1]
            mid = np.array(
                [self.p2_node_of_edge(a, b) for a, b in zip(va, vb)], dtype=int
            )
            self.top_edge_nodes = np.stack([va, vb, mid], axis=1)  # (ne, 3)
            pa, pb = mesh.vertices[va], mesh.vertices[vb]
            self.top_edge_len = np.sqrt(((pb - pa) ** 2).sum(-1))
            t = _EDGE_T
            self.edge_shape = np.stack(
                [(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=1
            )  # (3 qp, 3 nodes)
            self.top_edge_cell = mesh.edge_cell[top]
            self.edge_w = _EDGE_W

    # -- constraints -----------------------------------------------------

    def _build_constraints(self, pin_pressure: bool):
        mesh = self.mesh
        fixed = {}

        def fix(dof):
            fixed[dof] = 0.0

        for e, (va, vb) in enumerate(mesh.boundary_edges):
            vtag = mesh.edge_velocity_tag[e]
            nodes = (va, vb, self.p2_node_of_edge(va, vb))
            if vtag == VEL_NOSLIP:
                for nd in nodes:
                    fix(2 * nd)
                    fix(2 * nd + 1)
            elif vtag == VEL_SYMMETRY:
                for nd in nodes:
                    fix(2 * nd)
            if mesh.edge_damage_tag[e] == DMG_DIRICHLET:
                for v in (va, vb):
                    fix(self.off_phi + v)
        if pin_pressure:
            fix(self.off_p + 0)
        idx = np.array(sorted(fixed), dtype=int)
        self.constraint_idx = idx
        self.constraint_val = np.array([fixed[i] for i in idx])
        self._free_mask = np.ones(self.n_dof)
        self._free_mask[idx] = 0.0

    def apply_constraints(self, w: np.ndarray) -> np.ndarray:
        out = w.copy()
        out[self.constraint_idx] = self.constraint_val
        return out

    # -- states ----------------------------------------------------------

    def zero_state_vector(self) -> np.ndarray:
        return self.apply_constraints(np.zeros(self.n_dof))

    def state_to_vector(self, state: ExperimentState) -> np.ndarray:
        w = np.zeros(self.n_dof)
        w[: self.n_u] = state.u.ravel()
        w[self.off_p : self.off_phi] = state.p
        w[self.off_phi :] = state.phi
        return w

    def vector_to_state(self, w: np.ndarray) -> ExperimentState:
        return ExperimentState(
            u=w[: self.n_u].reshape(self.n_p2, 2).copy(),
            p=w[self.off_p : self.off_phi].copy(),
            phi=w[self.off_phi :].copy(),
        )

    # -- pointwise fields at quadrature points ---------------------------

    def _qp_fields(self, w_eff):
        u_nodes = w_eff[: self.n_u].reshape(self.n_p2, 2)
        p_cell = w_eff[self.off_p : self.off_phi]
        phi_nodes = w_eff[self.off_phi :]
        u_loc = u_nodes[self.cell_p2]  # (nc, 6, 2)
        phi_loc = phi_nodes[self.mesh.triangles]  # (nc, 3)
        grad_u = np.einsum("cai,cqaj->cqij", u_loc, self.grad2)
        u_qp = np.einsum("cai,qa->cqi", u_loc, self.N2)
        eps = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
        phi_qp = np.einsum("ca,qa->cq", phi_loc, self.N1)
        grad_phi = np.einsum("ca,caj->cj", phi_loc, self.grad1)  # (nc, 2)
        return u_loc, u_qp, grad_u, eps, phi_qp, grad_phi, p_cell

    def _supg_delta(self, u_qp):
        # smoothed cell-RMS speed; the 1e-30 keeps the derivative bounded at 0
        m = (u_qp**2).sum(-1).mean(axis=1)
        u_norm = np.sqrt(m + 1e-30)
        delta = self.config.c_supg * self.h_cell / (2.0 * u_norm + self.config.eps_vel)
        return delta, u_norm

    def strain_invariants(self, w_eff):
        """(J1, J2, phi) at all quadrature points, shapes (nc, nq)."""
        _, _, grad_u, eps, phi_qp, _, _ = self._qp_fields(w_eff)
        j1 = grad_u[..., 0, 0] + grad_u[..., 1, 1]
        q = np.einsum("cqij,cqij->cq", eps, eps)
        return j1, np.sqrt(q), phi_qp

    # -- residual ---------------------------------------------------------

    def body_force_at_qp(self, body_force=None):
        if body_force is None:
            g = np.asarray(self.config.gravity)
            return self.config.rho * np.broadcast_to(g, self.qp_xy.shape)
        return np.asarray(
            body_force(self.qp_xy[..., 0], self.qp_xy[..., 1]), dtype=float
        )

    def load_norm(self, body_force=None) -> float:
        """Norm of the discrete body-force load, the residual scale."""
        f_qp = self.body_force_at_qp(body_force)
        r_u = -np.einsum("cq,cqi,qa->cai", self.wdet, f_qp, self.N2)
        load = np.zeros(self.n_dof)
        np.add.at(load, self.cell_udofs.ravel(), r_u.reshape(-1, 12).ravel())
        load[self.constraint_idx] = 0.0
        return float(np.linalg.norm(load))

    def assemble_residual(
        self, w, stress: IsotropicStress, rate: RateModel, body_force=None
    ) -> np.ndarray:
        cfg = self.config
        w_eff = self.apply_constraints(np.asarray(w, dtype=float))
        u_loc, u_qp, grad_u, eps, phi_qp, grad_phi, p_cell = self._qp_fields(w_eff)
        wdet = self.wdet

        q = np.einsum("cqij,cqij->cq", eps, eps)
        f, _, _ = stress.factor(q, phi_qp)
        tau = f[..., None, None] * eps
        div_u = grad_u[..., 0, 0] + grad_u[..., 1, 1]
        j2 = np.sqrt(q + 1e-30)
        s = rate.values(j2, phi_qp)
        f_qp = self.body_force_at_qp(body_force)

        r_u = (
            np.einsum("cq,cqij,cqaj->cai", wdet, tau, self.grad2)
            - np.einsum("cq,c,cqai->cai", wdet, p_cell, self.grad2)
            - np.einsum("cq,cqi,qa->cai", wdet, f_qp, self.N2)
        )
        r_p = np.einsum("cq,cq->c", wdet, div_u)

        adv = np.einsum("cqi,ci->cq", u_qp, grad_phi)
        delta, _ = self._supg_delta(u_qp)
        strong = adv - s
        u_dot_g1 = np.einsum("cqi,cai->cqa", u_qp, self.grad1)
        r_phi = (
            np.einsum("cq,cq,qa->ca", wdet, adv - s, self.N1)
            + cfg.xi * np.einsum("cq,cai,ci->ca", wdet, self.grad1, grad_phi)
            + np.einsum("c,cq,cq,cqa->ca", delta, wdet, strong, u_dot_g1)
        )

        r = np.zeros(self.n_dof)
        np.add.at(r, self.cell_udofs.ravel(), r_u.reshape(-1, 12).ravel())
        np.add.at(r, self.off_p + np.arange(self.n_p), r_p)
        np.add.at(r, self.cell_phidofs.ravel(), r_phi.ravel())
        r[self.constraint_idx] = (
            np.asarray(w, dtype=float)[self.constraint_idx] - self.constraint_val
        )
        return r

    # -- jacobian ----------------------------------------------------------

    def assemble_jacobian(
        self, w, stress: IsotropicStress, rate: RateModel
    ) -> sp.csr_matrix:
        cfg = self.config
        w_eff = self.apply_constraints(np.asarray(w, dtype=float))
        u_loc, u_qp, grad_u, eps, phi_qp, grad_phi, p_cell = self._qp_fields(w_eff)
        wdet = self.wdet
        nc, nq = wdet.shape

        q = np.einsum("cqij,cqij->cq", eps, eps)
        f, df_dq, df_dphi = stress.factor(q, phi_qp)
        j2 = np.sqrt(q + 1e-30)
        s, ds_dj2, ds_dphi = rate.derivs(j2, phi_qp)

        G2, G1, N1, N2 = self.grad2, self.grad1, self.N1, self.N2
        EG = np.einsum("cqij,cqaj->cqai", eps, G2)  # (nc, nq, 6, 2)
        GG = np.einsum("cqaj,cqbj->cqab", G2, G2)

        # momentum block
        t1 = np.einsum("cq,cqab->cab", wdet * 0.5 * f, GG)
        k_uu = np.einsum("cq,cqam,cqbi->caibm", wdet * 0.5 * f, G2, G2)
        k_uu += np.einsum("cq,cqai,cqbm->caibm", wdet * 2.0 * df_dq, EG, EG)
        for i in range(2):
            k_uu[:, :, i, :, i] += t1
        k_uphi = np.einsum("cq,cqai,qd->caid", wdet * df_dphi, EG, N1)
        k_up = -np.einsum("cq,cqai->cai", wdet, G2)

        # incompressibility block
        k_pu = np.einsum("cq,cqbm->cbm", wdet, G2)

        # damage block
        adv = np.einsum("cqi,ci->cq", u_qp, grad_phi)
        strong = adv - s
        delta, u_norm = self._supg_delta(u_qp)
        u_dot_g1 = np.einsum("cqi,cai->cqa", u_qp, G1)  # (nc, nq, 3)
        dj2_du = EG / j2[..., None, None]  # (nc, nq, 6, 2)

        # d(delta)/du_{b,m} = -2 delta / (2 u_norm + eps) * dU/du
        du_norm = np.einsum("cqm,qb->cbm", u_qp, N2) / (
            u_norm[:, None, None] * nq
        )
        ddelta = (
            -2.0 * delta[:, None, None] / (2.0 * u_norm + cfg.eps_vel)[:, None, None]
        ) * du_norm  # (nc, 6b, 2m)

        # phi-phi
        k_phiphi = np.einsum("cq,qa,cqd->cad", wdet, N1, u_dot_g1)
        k_phiphi += cfg.xi * np.einsum("cq,cai,cdi->cad", wdet, G1, G1)
        k_phiphi -= np.einsum("cq,qa,cq,qd->cad", wdet, N1, ds_dphi, N1)
        k_phiphi += np.einsum("c,cq,cqa,cqd->cad", delta, wdet, u_dot_g1, u_dot_g1)
        k_phiphi -= np.einsum(
            "c,cq,cqa,cq,qd->cad", delta, wdet, u_dot_g1, ds_dphi, N1
        )

        # phi-u: Galerkin advection/source, then the three SUPG pieces
        # delta'*(u.grad a)*R + delta*(e_m.grad a)*R + delta*(u.grad a)*R'
        dadv = np.einsum("qb,cm->cqbm", N2, grad_phi)  # d(adv)/du at every qp
        ds_du = ds_dj2[..., None, None] * dj2_du  # (nc, nq, 6, 2)
        dstrong = dadv - ds_du
        k_phiu = np.einsum("cq,qa,cqbm->cabm", wdet, N1, dstrong)
        k_phiu += np.einsum("cbm,cq,cq,cqa->cabm", ddelta, wdet, strong, u_dot_g1)
        k_phiu += np.einsum("c,cq,cq,qb,cam->cabm", delta, wdet, strong, N2, G1)
        k_phiu += np.einsum("c,cq,cqa,cqbm->cabm", delta, wdet, u_dot_g1, dstrong)

        blocks = []

        def add_block(local, rows, cols):
            blocks.append(
                (
                    local.reshape(local.shape[0], rows.shape[1], cols.shape[1]),
                    rows,
                    cols,
                )
            )

        udofs = self.cell_udofs
        pdofs = (self.off_p + np.arange(self.n_p))[:, None]
        phidofs = self.cell_phidofs

        add_block(k_uu.reshape(nc, 12, 12), udofs, udofs)
        add_block(k_uphi.reshape(nc, 12, 3), udofs, phidofs)
        add_block(k_up.reshape(nc, 12, 1), udofs, pdofs)
        add_block(k_pu.reshape(nc, 1, 12), pdofs, udofs)
        add_block(k_phiphi, phidofs, phidofs)
        add_block(k_phiu.reshape(nc, 3, 12), phidofs, udofs)

        data, rows, cols = [], [], []
        for local, rr, cc in blocks:
            nr, ncol = local.shape[1], local.shape[2]
            rows.append(np.repeat(rr, ncol, axis=1).ravel())
            cols.append(np.tile(cc, (1, nr)).ravel())
            data.append(local.ravel())
        K = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dof, self.n_dof),
        ).tocsr()

        # symmetric elimination: identity rows, zero columns
        free = sp.diags(self._free_mask)
        fixed = sp.diags(1.0 - self._free_mask)
        return (free @ K @ free + fixed).tocsr()

    # -- nonlinear solve ---------------------------------------------------

    def solve_forward(
        self,
        stress: IsotropicStress,
        rate: RateModel,
        initial_guess: np.ndarray | None = None,
        body_force=None,
        continuation: bool = False,
    ) -> SolveOutcome:
        """Damped Newton solve of the coupled system.

        With ``continuation=True`` a failed direct solve is retried through a
        fixed homotopy ladder that scales the damage-rate closure up from
        1/8, warm-starting each stage; the returned outcome is always for the
        unscaled system.  Failures are encoded in the outcome, never raised.
        """
        out = self._newton(stress, rate, initial_guess, body_force)
        if out.converged or not continuation:
            return out
        w = (
            self.zero_state_vector()
            if initial_guess is None
            else self.apply_constraints(np.asarray(initial_guess, dtype=float))
        )
        from .closures import ScaledRate

        for lam in (0.125, 0.25, 0.5, 0.75, 1.0):
            out = self._newton(stress, ScaledRate(rate, lam), w, body_force)
            if not out.converged:
                return out
            w = self.state_to_vector(out.state)
        return out

    def _newton(
        self,
        stress: IsotropicStress,
        rate: RateModel,
        initial_guess: np.ndarray | None = None,
        body_force=None,
    ) -> SolveOutcome:
        cfg = self.config
        w = (
            self.zero_state_vector()
            if initial_guess is None
            else self.apply_constraints(np.asarray(initial_guess, dtype=float))
        )
        ref = max(self.load_norm(body_force), 1e-300)

        def res_norm(vec):
            r = self.assemble_residual(vec, stress, rate, body_force)
            return r, float(np.linalg.norm(r))

        r, rn = res_norm(w)
        for it in range(cfg.max_newton + 1):
            if not np.isfinite(rn) or rn > cfg.divergence_factor * ref:
                return SolveOutcome(
                    self.vector_to_state(w), False, rn / ref, it, FAILURE_DIVERGED
                )
            if rn <= cfg.newton_tol * ref:
                return SolveOutcome(
                    self.vector_to_state(w), True, rn / ref, it, FAILURE_NONE
                )
            if it == cfg.max_newton:
                break
            K = self.assemble_jacobian(w, stress, rate)
            try:
                lu = spla.splu(K.tocsc())
                step = lu.solve(-r)
            except (RuntimeError, ValueError):
                return SolveOutcome(
                    self.vector_to_state(w), False, rn / ref, it, FAILURE_SINGULAR
                )
            if not np.all(np.isfinite(step)):
                return SolveOutcome(
                    self.vector_to_state(w), False, rn / ref, it, FAILURE_SINGULAR
                )
            accepted = False
            alpha = 1.0
            for _ in range(cfg.max_backtracks + 1):
                r_new, rn_new = res_norm(w + alpha * step)
                if np.isfinite(rn_new) and rn_new < rn:
                    w = w + alpha * step
                    r, rn = r_new, rn_new
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                return SolveOutcome(
                    self.vector_to_state(w), False, rn / ref, it + 1, FAILURE_STALL
                )
        return SolveOutcome(
            self.vector_to_state(w), False, rn / ref, cfg.max_newton, FAILURE_STALL
        )

    # -- sampling ----------------------------------------------------------

    def sample_invariants(self, outcome: SolveOutcome) -> dict:
        """Invariant samples (J1, J2, phi) at quadrature points.

        One row per quadrature point of every cell outside the excluded
        bottom-right corner; carries the quadrature weight, a small/large
        strain-rate regime tag (split at J2 = sqrt(20)), and the physical
        location.
        """
        if not outcome.converged:
            raise ContractViolation("invariant sampling requires a converged solve")
        w = self.apply_constraints(self.state_to_vector(outcome.state))
        j1, j2, phi = self.strain_invariants(w)
        keep = np.ones(self.mesh.n_triangles, dtype=bool)
        keep[self.mesh.corner_cells] = False
        cells = np.repeat(np.arange(self.mesh.n_triangles), self.nq).reshape(
            self.mesh.n_triangles, self.nq
        )
        sel = np.broadcast_to(keep[:, None], j2.shape)
        return {
            "J1": j1[sel],
            "J2": j2[sel],
            "phi": phi[sel],
            "weight": self.wdet[sel],
            "region": (j2[sel] > _SQRT20).astype(int),
            "x": self.qp_xy[..., 0][sel],
            "y": self.qp_xy[..., 1][sel],
            "cell": cells[sel],
        }
