"""Experiment configuration and its JSON round trip.

All numeric defaults below are desk-scale, nondimensional choices made for
this artifact: density, gravity, diffusion, and the dome dimensions are tuned
so the ground-truth run produces order-one strain rates spanning both
strain-rate regimes of the damage closure (fracture threshold 2, healing
threshold 1).  They are not taken from any measured ice sheet.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .closures import DamageParams, GlenParams
from .errors import ContractViolation


@dataclass
class ExperimentConfig:
    # dome geometry
    length: float = 4.0
    thickness: float = 1.0
    margin_fraction: float = 0.9
    nx: int = 14
    ny: int = 7
    # physics
    rho: float = 1.0
    gravity: tuple = (0.0, -6.5)
    xi: float = 0.15  # damage diffusion
    # stress closure (power law)
    mu: float = 1.0
    glen_n: float = 3.0
    eps_reg: float = 1e-12
    # ground-truth damage-rate closure; the gate widths smooth its branch
    # guards inside the PDE (the equilibrium equation has no discrete root
    # with exact step guards near stagnation zones)
    gamma_f: float = 0.5
    gamma_h: float = 0.1
    eps_f: float = 2.0
    eps_h: float = 1.0
    zeta: float = 0.001
    heal_width: float = 0.01
    frac_width: float = 0.1
    # discretization / solver
    quad_order: int = 4
    newton_tol: float = 1e-9
    max_newton: int = 40
    max_backtracks: int = 12
    divergence_factor: float = 1e8
    c_supg: float = 1.0
    eps_vel: float = 1e-8
    # invariant-space grid resolution (per regime)
    grid_nj2: int = 64
    grid_nphi: int = 32

    def __post_init__(self):
        if self.xi <= 0:
            raise ContractViolation("xi must be positive")
        if self.nx < 2 or self.ny < 2:
            raise ContractViolation("need at least 2 cells per direction")
        if self.quad_order < 4:
            raise ContractViolation("quadrature order must be at least 4")
        self.gravity = tuple(float(g) for g in self.gravity)

    def glen_params(self) -> GlenParams:
        return GlenParams(mu=self.mu, n=self.glen_n, eps_reg=self.eps_reg)

    def damage_params(self) -> DamageParams:
        return DamageParams(
            gamma_f=self.gamma_f,
            gamma_h=self.gamma_h,
            eps_f=self.eps_f,
            eps_h=self.eps_h,
            zeta=self.zeta,
            n=self.glen_n,
        )

    def truth_rate(self):
        from .closures import AlbrechtLevermannRate

        return AlbrechtLevermannRate(
            self.damage_params(),
            heal_width=self.heal_width,
            frac_width=self.frac_width,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gravity"] = list(d["gravity"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file, reporting parse errors with line context."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        line = text.splitlines()[err.lineno - 1] if text.splitlines() else ""
        raise ContractViolation(
            f"{path}:{err.lineno}:{err.colno}: {err.msg}\n  {line}"
        ) from err
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
