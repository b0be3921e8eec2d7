r"""Hand-derived stress and damage-rate closures.

These are the reference models used both as ground truth for synthetic
observations and as oracles in tests:

* power-law (Glen) viscous stress,
  ``tau = mu * (e:e + eps_reg)^((1/n - 1)/2) * e``;
* the same stress weakened by a scalar damage factor ``phi`` in [0, 1],
  ``tau = (1 - (1 - zeta) * phi) * tau_glen`` (the ``1 - zeta`` cap keeps the
  viscosity strictly positive at full damage);
* the Albrecht-Levermann damage rate with threshold-gated fracture and
  healing terms;
* the ESTAR enhancement-factor stress (3D pointwise pipeline);
* the threshold/envelope damage-rate form ("damage2", pointwise only).

The strain-rate norm used throughout is the second invariant
``J2 = sqrt(e:e)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateGeometry
from .invariants import (
    ConstitutiveRelation,
    scalar_signature,
    symmetric_signature,
    pack,
    unpack,
    wineman_pipkin_eval,
)


@dataclass(frozen=True)
class GlenParams:
    """Power-law stress parameters."""

    mu: float = 1.0
    n: float = 3.0
    eps_reg: float = 1e-12  # added to J2^2 before the fractional power

    def __post_init__(self):
        if not self.mu > 0:
            raise ContractViolation("mu must be positive")
        if not self.n >= 1:
            raise ContractViolation("n must be >= 1")
        if self.eps_reg < 0:
            raise ContractViolation("eps_reg must be nonnegative")


@dataclass(frozen=True)
class DamageParams:
    """Fracture/healing damage-rate parameters.

    ``n`` is the flow exponent entering the fracture threshold
    ``J2 > (1 - phi)^(-n) * eps_f``.
    """

    gamma_f: float = 0.5
    gamma_h: float = 0.1
    eps_f: float = 2.0
    eps_h: float = 1.0
    zeta: float = 0.001
    n: float = 3.0

    def __post_init__(self):
        if self.gamma_f < 0 or self.gamma_h < 0:
            raise ContractViolation("rate factors must be nonnegative")
        if not (self.eps_f > self.eps_h > 0):
            raise ContractViolation("thresholds must satisfy eps_f > eps_h > 0")
        if not (0 < self.zeta < 1):
            raise ContractViolation("zeta must lie in (0, 1)")


@dataclass(frozen=True)
class EstarParams:
    """Compression/shear enhancement parameters."""

    E_C: float = 1.0
    E_S: float = 8.0
    mu: float = 1.0
    n: float = 3.0

    def __post_init__(self):
        if not (self.E_C > 0 and self.E_S > 0):
            raise ContractViolation("enhancement factors must be positive")


@dataclass(frozen=True)
class Damage2Params:
    """Threshold-stress envelope damage parameters."""

    tau_0: float = 1.0
    eps_0: float = 1.0
    kappa: float = 2.0
    mu: float = 1.0
    n: float = 3.0

    def __post_init__(self):
        if not (self.tau_0 > 0 and self.eps_0 > 0):
            raise ContractViolation("tau_0 and eps_0 must be positive")
        if not self.kappa > 1:
            raise ContractViolation("kappa must exceed 1")


def _glen_factor(q, p: GlenParams):
    """Viscosity factor f with tau = f * e, as a function of q = e:e."""
    return p.mu * (q + p.eps_reg) ** ((1.0 / p.n - 1.0) / 2.0)


def glen_cr(p: GlenParams, dim: int = 2) -> ConstitutiveRelation:
    """Glen's flow law as a coefficient-form relation on one tensor input."""
    sig = symmetric_signature(dim)

    def coeff(J, params):
        mu, n, eps_reg = params
        j2 = J[..., 1]
        f = mu * (j2 * j2 + eps_reg) ** ((1.0 / n - 1.0) / 2.0)
        zero = np.zeros_like(f)
        cols = [zero, f] if dim == 2 else [zero, f, zero]
        return np.stack(cols, axis=-1)

    return ConstitutiveRelation(
        (sig,), sig, coeff, params=np.array([p.mu, p.n, p.eps_reg])
    )


def damaged_cr(gp: GlenParams, dp: DamageParams, dim: int = 2) -> ConstitutiveRelation:
    """Damage-weakened Glen stress on inputs (strain rate, phi)."""
    tensor = symmetric_signature(dim)

    def coeff(J, params):
        mu, n, eps_reg, cap = params
        j2 = J[..., 1]
        phi = J[..., 2 if dim == 2 else 3]
        f = (1.0 - cap * phi) * mu * (j2 * j2 + eps_reg) ** ((1.0 / n - 1.0) / 2.0)
        zero = np.zeros_like(f)
        cols = [zero, f] if dim == 2 else [zero, f, zero]
        return np.stack(cols, axis=-1)

    return ConstitutiveRelation(
        (tensor, scalar_signature()),
        tensor,
        coeff,
        params=np.array([gp.mu, gp.n, gp.eps_reg, 1.0 - dp.zeta]),
    )


def glen_stress(strain_rate: np.ndarray, p: GlenParams) -> np.ndarray:
    """Deviatoric stress of the power law for one (d, d) strain rate."""
    strain_rate = np.asarray(strain_rate, dtype=float)
    dim = strain_rate.shape[-1]
    out = wineman_pipkin_eval(glen_cr(p, dim), (pack(strain_rate),))
    return unpack(out, dim)


def damaged_stress(
    strain_rate: np.ndarray, phi: float, gp: GlenParams, dp: DamageParams
) -> np.ndarray:
    """Glen stress reduced by the capped damage factor ``1 - (1-zeta)*phi``."""
    phi_arr = np.asarray(phi, dtype=float)
    if np.any(phi_arr < 0) or np.any(phi_arr > 1):
        raise ContractViolation("phi must lie in [0, 1]")
    strain_rate = np.asarray(strain_rate, dtype=float)
    dim = strain_rate.shape[-1]
    out = wineman_pipkin_eval(damaged_cr(gp, dp, dim), (pack(strain_rate), phi_arr))
    return unpack(out, dim)


def albrecht_levermann_rate(J2, phi, p: DamageParams):
    """Material damage rate s = s_f + s_h.

    Fracture: ``s_f = gamma_f * J2 * (1 - phi)`` when
    ``J2 > (1 - phi)^(-n) * eps_f`` (evaluated as ``J2 (1-phi)^n > eps_f`` so
    that ``phi = 1`` is handled without dividing by zero); healing:
    ``s_h = gamma_h * (J2 - eps_h)`` when ``J2 <= eps_h`` and ``phi > 0``.
    Vectorizes over J2/phi arrays.
    """
    J2 = np.asarray(J2, dtype=float)
    phi = np.asarray(phi, dtype=float)
    fracture = J2 * (1.0 - phi) ** p.n > p.eps_f
    healing = (J2 <= p.eps_h) & (phi > 0.0)
    s_f = np.where(fracture, p.gamma_f * J2 * (1.0 - phi), 0.0)
    s_h = np.where(healing, p.gamma_h * (J2 - p.eps_h), 0.0)
    out = s_f + s_h
    return out if out.ndim else float(out)


def _estar_pipeline(strain_rate, vorticity, velocity, p: EstarParams):
    e = np.asarray(strain_rate, dtype=float)
    w = np.asarray(vorticity, dtype=float)
    u = np.asarray(velocity, dtype=float)
    if e.shape != (3, 3) or w.shape != (3,) or u.shape != (3,):
        raise ContractViolation("estar_stress expects 3D tensor/vector inputs")
    u2 = u @ u
    if u2 == 0.0:
        raise DegenerateGeometry("zero velocity: shear plane undefined")
    # Spin tensor from the vorticity: W_ij = -1/2 eps_ijk w_k.
    spin = 0.5 * np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    advect = (e + spin) @ u
    omega_1 = w - 2.0 * np.cross(u, advect) / u2
    omega_d = omega_1 - (u @ omega_1) * u / u2
    nrm_od = np.linalg.norm(omega_d)
    if nrm_od == 0.0:
        raise DegenerateGeometry("deformational vorticity vanishes")
    omega_hat = omega_d / nrm_od
    u_cross = np.cross(u, omega_d)
    nrm_uc = np.linalg.norm(u_cross)
    if nrm_uc == 0.0:
        raise DegenerateGeometry("velocity parallel to deformational vorticity")
    normal = u_cross / nrm_uc
    en = e @ normal
    e_shear = en - (normal @ en) * normal - (omega_hat @ en) * omega_hat
    j2 = np.sqrt(np.einsum("ij,ij->", e, e))
    lam_s = float(np.linalg.norm(e_shear) / j2) if j2 > 0 else 0.0
    enhancement = p.E_C + (p.E_S - p.E_C) * lam_s**2
    tau = enhancement ** (1.0 / p.n) * p.mu * j2 ** (1.0 / p.n - 1.0) * e
    return tau, lam_s


def estar_stress(
    strain_rate: np.ndarray,
    vorticity: np.ndarray,
    velocity: np.ndarray,
    p: EstarParams,
) -> np.ndarray:
    """Shear-fraction enhanced power-law stress (3D pointwise pipeline).

    The velocity gradient needed for the advective term is reconstructed from
    the inputs as ``grad u = e + W(vorticity)``.
    """
    tau, _ = _estar_pipeline(strain_rate, vorticity, velocity, p)
    return tau


def estar_shear_fraction(strain_rate, vorticity, velocity, p: EstarParams) -> float:
    """The shear fraction lambda_S of the pipeline (exposed for testing)."""
    _, lam_s = _estar_pipeline(strain_rate, vorticity, velocity, p)
    return lam_s


def damage2_envelope(J2, p: Damage2Params):
    """Effective-stress curve a and threshold envelope b at J2."""
    a_coeff = p.mu * np.asarray(J2, dtype=float) ** (1.0 / p.n)
    b = p.tau_0 * np.exp(-(np.asarray(J2) - p.eps_0) / (p.eps_0 * (p.kappa - 1.0)))
    return a_coeff, b


def damage2_rate(J2, J2_material_rate, phi, p: Damage2Params):
    """Damage rate of the threshold/envelope model (pointwise form).

    Returns ``d(phi_env)/dJ2 * dJ2/dt`` while the undamaged stress exceeds the
    envelope, else 0.  ``phi_env(J2) = 1 - (J2/eps_0)^(-1/n) * exp(-(J2 -
    eps_0)/(eps_0 (kappa-1)))`` and its derivative is ``(J2/eps_0)^(-1/n) *
    exp(.) * (1/(n J2) + 1/(eps_0 (kappa-1)))``.
    """
    J2 = np.asarray(J2, dtype=float)
    if np.any(J2 <= 0):
        raise ContractViolation("damage2_rate requires J2 > 0")
    phi = np.asarray(phi, dtype=float)
    a_coeff, b = damage2_envelope(J2, p)
    a = (1.0 - phi) * a_coeff
    decay = np.exp(-(J2 - p.eps_0) / (p.eps_0 * (p.kappa - 1.0)))
    pow_term = (J2 / p.eps_0) ** (-1.0 / p.n)
    dphi_dj2 = pow_term * decay * (1.0 / (p.n * J2) + 1.0 / (p.eps_0 * (p.kappa - 1.0)))
    out = np.where(b < a, dphi_dj2 * np.asarray(J2_material_rate, dtype=float), 0.0)
    return out if out.ndim else float(out)


def damage2_phi_envelope(J2, p: Damage2Params):
    """Damage value that puts the effective stress on the envelope."""
    J2 = np.asarray(J2, dtype=float)
    decay = np.exp(-(J2 - p.eps_0) / (p.eps_0 * (p.kappa - 1.0)))
    return 1.0 - (J2 / p.eps_0) ** (-1.0 / p.n) * decay


class IsotropicStress:
    """Vectorized damaged power-law stress for quadrature-point batches.

    ``tau = f(q, phi) * e`` with ``q = e:e``; exposes f and its partial
    derivatives, which is all the assembly needs for the exact Jacobian.
    """

    def __init__(self, glen: GlenParams, damage: DamageParams | None = None):
        self.glen = glen
        self.cap = 0.0 if damage is None else 1.0 - damage.zeta

    def factor(self, q, phi):
        """Return (f, df/dq, df/dphi) elementwise over q = e:e and phi."""
        p = self.glen
        expo = (1.0 / p.n - 1.0) / 2.0
        base = q + p.eps_reg
        if expo == 0.0:  # linear viscosity, constant factor
            g = np.full_like(np.asarray(q, dtype=float), p.mu)
            dg_dq = np.zeros_like(g)
        else:
            g = p.mu * base**expo
            dg_dq = p.mu * expo * base ** (expo - 1.0)
        damage_factor = 1.0 - self.cap * np.asarray(phi, dtype=float)
        f = damage_factor * g
        return f, damage_factor * dg_dq, -self.cap * g


class RateModel:
    """Interface shared by damage-rate closures used inside the simulation."""

    n_params = 0

    def get_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_params(self, theta) -> None:
        if len(np.atleast_1d(theta)):
            raise ContractViolation("this rate model has no parameters")

    def values(self, J2, phi):
        raise NotImplementedError

    def derivs(self, J2, phi):
        """Return (s, ds/dJ2, ds/dphi) elementwise."""
        raise NotImplementedError

    def param_gradient(self, J2, phi, cotangent) -> np.ndarray:
        """Gradient of sum(cotangent * s) with respect to the parameters."""
        return np.zeros(0)

    def param_jvp(self, J2, phi, direction):
        """Directional derivative of s with respect to the parameters."""
        return np.zeros_like(np.asarray(J2, dtype=float))


def _smoothstep(t):
    """C1 ramp: 0 for t <= 0, 3t^2 - 2t^3 on (0, 1), 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _smoothstep_deriv(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 6.0 * t * (1.0 - t), 0.0)


class AlbrechtLevermannRate(RateModel):
    """Ground-truth fracture/healing rate; no trainable parameters.

    With zero gate widths this is the exact branch form of
    :func:`albrecht_levermann_rate`.  The equilibrium damage equation,
    however, settles exactly on the switching manifolds wherever advective
    removal is slow (stagnant bed, plume edges), where the discontinuous
    source admits no discrete root.  Positive widths replace the two guards
    by C1 ramps: the fracture gate turns on over ``frac_width`` in the excess
    variable ``J2 (1-phi)^n - eps_f`` and the healing gate over
    ``heal_width`` in phi.  The experiment uses small nonzero widths.
    """

    def __init__(
        self, params: DamageParams, heal_width: float = 0.0, frac_width: float = 0.0
    ):
        self.params = params
        self.heal_width = float(heal_width)
        self.frac_width = float(frac_width)

    def _gates(self, J2, phi):
        p = self.params
        excess = J2 * (1.0 - phi) ** p.n - p.eps_f
        if self.frac_width > 0.0:
            gf = _smoothstep(excess / self.frac_width)
        else:
            gf = (excess > 0.0).astype(float)
        if self.heal_width > 0.0:
            gh = _smoothstep(phi / self.heal_width)
        else:
            gh = (phi > 0.0).astype(float)
        gh = gh * (J2 <= p.eps_h)
        return gf, gh, excess

    def values(self, J2, phi):
        p = self.params
        J2 = np.asarray(J2, dtype=float)
        phi = np.asarray(phi, dtype=float)
        gf, gh, _ = self._gates(J2, phi)
        return gf * p.gamma_f * J2 * (1.0 - phi) + gh * p.gamma_h * (J2 - p.eps_h)

    def derivs(self, J2, phi):
        p = self.params
        J2 = np.asarray(J2, dtype=float)
        phi = np.asarray(phi, dtype=float)
        gf, gh, excess = self._gates(J2, phi)
        one_m = 1.0 - phi
        s_f = p.gamma_f * J2 * one_m
        s_h = p.gamma_h * (J2 - p.eps_h)
        s = gf * s_f + gh * s_h

        if self.frac_width > 0.0:
            dgf = _smoothstep_deriv(excess / self.frac_width) / self.frac_width
        else:
            dgf = np.zeros_like(J2)
        dgf_dj2 = dgf * one_m**p.n
        dgf_dphi = dgf * (-p.n) * J2 * one_m ** (p.n - 1.0)
        if self.heal_width > 0.0:
            dgh_dphi = (
                _smoothstep_deriv(phi / self.heal_width)
                / self.heal_width
                * (J2 <= p.eps_h)
            )
        else:
            dgh_dphi = np.zeros_like(phi)

        ds_dj2 = gf * p.gamma_f * one_m + dgf_dj2 * s_f + gh * p.gamma_h
        ds_dphi = -gf * p.gamma_f * J2 + dgf_dphi * s_f + dgh_dphi * s_h
        return s, ds_dj2, ds_dphi


class ScaledRate(RateModel):
    """A rate closure multiplied by a fixed factor (solver continuation)."""

    def __init__(self, inner: RateModel, factor: float):
        self.inner = inner
        self.factor = float(factor)

    @property
    def n_params(self) -> int:
        return self.inner.n_params

    def get_params(self):
        return self.inner.get_params()

    def set_params(self, theta):
        self.inner.set_params(theta)

    def values(self, J2, phi):
        return self.factor * self.inner.values(J2, phi)

    def derivs(self, J2, phi):
        s, dj, dp = self.inner.derivs(J2, phi)
        return self.factor * s, self.factor * dj, self.factor * dp

    def param_gradient(self, J2, phi, cotangent):
        return self.factor * self.inner.param_gradient(J2, phi, cotangent)

    def param_jvp(self, J2, phi, direction):
        return self.factor * self.inner.param_jvp(J2, phi, direction)


class ConstantRate(RateModel):
    """Fixed spatially-constant damage rate (tests and failure probes)."""

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def values(self, J2, phi):
        return np.full_like(np.asarray(J2, dtype=float), self.value)

    def derivs(self, J2, phi):
        s = self.values(J2, phi)
        return s, np.zeros_like(s), np.zeros_like(s)


ZERO_RATE = ConstantRate(0.0)
