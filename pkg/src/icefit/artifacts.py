"""Ground-truth generation and on-disk experiment artifacts.

A truth directory contains everything a training run consumes, in plain text
with full double precision (every float is written with 17 significant
digits, so values round-trip bitwise):

* ``config.json``        resolved experiment configuration
* ``mesh_topology.csv``  triangle connectivity (cell, v0, v1, v2)
* ``fields/velocity.csv``   columns: node_x, node_y, ux, uy (quadratic nodes)
* ``fields/pressure.csv``   columns: cell, centroid_x, centroid_y, p
* ``fields/damage.csv``     columns: node_x, node_y, phi (vertices)
* ``invariants.csv``     quadrature-point samples with regime/region tags
* ``scaler.json``        input standardization fitted on the truth invariants
* ``observations/noise_*.json``  noisy observation sets, (delta, seed) tagged
* ``meta.json``          solver diagnostics and borehole scalings
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .closures import IsotropicStress, ZERO_RATE
from .config import ExperimentConfig, load_config, save_config
from .errors import ContractViolation
from .fem import ExperimentState, Simulation
from .network import InputScaler, fit_scaler
from .observers import (
    InvariantDomainGrid,
    ObservationSet,
    add_noise,
    set_borehole_scalings,
)

DEFAULT_DELTAS = (0.0, 0.01, 0.05)
FMT = "%.17g"


@dataclass
class TruthArtifacts:
    """In-memory bundle of everything generated from the ground-truth run."""

    config: ExperimentConfig
    glen_state: ExperimentState
    truth_state: ExperimentState
    samples: dict
    scaler: InputScaler
    observations: dict  # delta -> ObservationSet
    gamma_u: float
    gamma_p: float
    grid: InvariantDomainGrid
    meta: dict = field(default_factory=dict)

    def observation(self, delta: float) -> ObservationSet:
        for key, obs in self.observations.items():
            if abs(key - delta) < 1e-12:
                return obs
        raise ContractViolation(f"no observation set for delta={delta}")


def generate_truth(
    config: ExperimentConfig,
    deltas=DEFAULT_DELTAS,
    noise_seed: int = 2024,
) -> TruthArtifacts:
    """Solve the dome with the reference damage closure and derive artifacts.

    The undamaged (power-law) solution is solved first and used both as the
    continuation seed for the damaged system and, later, as the initial guess
    for every training solve.  Observation noise for the k-th delta uses seed
    ``noise_seed + k``.
    """
    sim = Simulation(config)
    stress = IsotropicStress(config.glen_params(), config.damage_params())
    glen = sim.solve_forward(stress, ZERO_RATE)
    if not glen.converged:
        raise ContractViolation(
            f"undamaged base solve failed: {glen.failure_kind}"
        )
    truth = sim.solve_forward(
        stress,
        config.truth_rate(),
        initial_guess=sim.state_to_vector(glen.state),
        continuation=True,
    )
    if not truth.converged:
        raise ContractViolation(f"ground-truth solve failed: {truth.failure_kind}")
    samples = sim.sample_invariants(truth)
    scaler = fit_scaler(np.column_stack([samples["J2"], samples["phi"]]))
    observations = {
        float(d): add_noise(truth.state, float(d), noise_seed + k)
        for k, d in enumerate(deltas)
    }
    gamma_u, gamma_p = set_borehole_scalings(sim, truth.state)
    grid = InvariantDomainGrid.default(config.grid_nj2, config.grid_nphi)
    grid.mark_in_distribution(samples["J2"], samples["phi"])
    meta = {
        "newton_iterations": truth.newton_iterations,
        "relative_residual": truth.relative_residual,
        "gamma_u": gamma_u,
        "gamma_p": gamma_p,
        "noise_seed": noise_seed,
        "deltas": [float(d) for d in deltas],
    }
    return TruthArtifacts(
        config=config,
        glen_state=glen.state,
        truth_state=truth.state,
        samples=samples,
        scaler=scaler,
        observations=observations,
        gamma_u=gamma_u,
        gamma_p=gamma_p,
        grid=grid,
        meta=meta,
    )


def _write_table(path, header: str, columns) -> None:
    data = np.column_stack(columns)
    np.savetxt(path, data, fmt=FMT, delimiter=",", header=header, comments="# ")


def save_truth(artifacts: TruthArtifacts, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "fields"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "observations"), exist_ok=True)
    save_config(artifacts.config, os.path.join(out_dir, "config.json"))

    sim = Simulation(artifacts.config)
    mesh = sim.mesh
    np.savetxt(
        os.path.join(out_dir, "mesh_topology.csv"),
        np.column_stack([np.arange(mesh.n_triangles), mesh.triangles]),
        fmt="%d",
        delimiter=",",
        header="cell,v0,v1,v2",
        comments="# ",
    )
    state = artifacts.truth_state
    _write_table(
        os.path.join(out_dir, "fields", "velocity.csv"),
        "node_x,node_y,ux,uy",
        [sim.p2_coords[:, 0], sim.p2_coords[:, 1], state.u[:, 0], state.u[:, 1]],
    )
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    _write_table(
        os.path.join(out_dir, "fields", "pressure.csv"),
        "cell,centroid_x,centroid_y,p",
        [np.arange(mesh.n_triangles), centroids[:, 0], centroids[:, 1], state.p],
    )
    _write_table(
        os.path.join(out_dir, "fields", "damage.csv"),
        "node_x,node_y,phi",
        [mesh.vertices[:, 0], mesh.vertices[:, 1], state.phi],
    )
    s = artifacts.samples
    _write_table(
        os.path.join(out_dir, "invariants.csv"),
        "J1,J2,phi,weight,region,x,y,cell",
        [s["J1"], s["J2"], s["phi"], s["weight"], s["region"], s["x"], s["y"],
         s["cell"]],
    )
    with open(os.path.join(out_dir, "scaler.json"), "w") as fh:
        json.dump(
            {"mean": artifacts.scaler.mean.tolist(),
             "std": artifacts.scaler.std.tolist()},
            fh, indent=2,
        )
        fh.write("\n")
    for delta, obs in sorted(artifacts.observations.items()):
        path = os.path.join(out_dir, "observations", f"noise_{delta:.6f}.json")
        with open(path, "w") as fh:
            json.dump(obs.to_dict(), fh)
            fh.write("\n")
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(artifacts.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_truth(truth_dir) -> TruthArtifacts:
    """Rebuild the artifact bundle from a truth directory.

    Observation sets, the scaler, and solver metadata are read from disk; the
    deterministic solves (undamaged base state) are recomputed from the
    stored configuration.
    """
    config = load_config(os.path.join(truth_dir, "config.json"))
    sim = Simulation(config)
    vel = np.loadtxt(os.path.join(truth_dir, "fields", "velocity.csv"),
                     delimiter=",")
    pre = np.loadtxt(os.path.join(truth_dir, "fields", "pressure.csv"),
                     delimiter=",")
    dmg = np.loadtxt(os.path.join(truth_dir, "fields", "damage.csv"),
                     delimiter=",")
    truth_state = ExperimentState(
        u=vel[:, 2:4].copy(), p=pre[:, 3].copy(), phi=dmg[:, 2].copy()
    )
    inv = np.loadtxt(os.path.join(truth_dir, "invariants.csv"), delimiter=",")
    samples = {
        "J1": inv[:, 0], "J2": inv[:, 1], "phi": inv[:, 2], "weight": inv[:, 3],
        "region": inv[:, 4].astype(int), "x": inv[:, 5], "y": inv[:, 6],
        "cell": inv[:, 7].astype(int),
    }
    with open(os.path.join(truth_dir, "scaler.json")) as fh:
        sc = json.load(fh)
    scaler = InputScaler(np.asarray(sc["mean"]), np.asarray(sc["std"]))
    observations = {}
    obs_dir = os.path.join(truth_dir, "observations")
    for name in sorted(os.listdir(obs_dir)):
        with open(os.path.join(obs_dir, name)) as fh:
            obs = ObservationSet.from_dict(json.load(fh))
        observations[obs.delta] = obs
    with open(os.path.join(truth_dir, "meta.json")) as fh:
        meta = json.load(fh)

    stress = IsotropicStress(config.glen_params(), config.damage_params())
    glen = sim.solve_forward(stress, ZERO_RATE)
    grid = InvariantDomainGrid.default(config.grid_nj2, config.grid_nphi)
    grid.mark_in_distribution(samples["J2"], samples["phi"])
    return TruthArtifacts(
        config=config,
        glen_state=glen.state,
        truth_state=truth_state,
        samples=samples,
        scaler=scaler,
        observations=observations,
        gamma_u=float(meta["gamma_u"]),
        gamma_p=float(meta["gamma_p"]),
        grid=grid,
        meta=meta,
    )
