"""Learning pointwise ice damage closures inside a nonlinear Stokes simulation.

The package couples a 2D mixed finite-element model of gravity-driven ice
flow (power-law stress weakened by an advected damage field) with trainable
frame-invariant damage-rate closures, and recovers closure parameters from
synthetic velocity/pressure observations via discrete-adjoint gradients and
quasi-Newton optimization.
"""

from .closures import (
    AlbrechtLevermannRate,
    ConstantRate,
    DamageParams,
    Damage2Params,
    EstarParams,
    GlenParams,
    IsotropicStress,
    albrecht_levermann_rate,
    damage2_rate,
    damaged_stress,
    estar_stress,
    glen_stress,
)
from .config import ExperimentConfig, load_config, save_config
from .errors import ContractViolation, DegenerateData, DegenerateGeometry
from .fem import ExperimentState, Simulation, SolveOutcome
from .invariants import (
    ConstitutiveRelation,
    InvariantBasis,
    TensorSignature,
    batch_eval,
    form_invariants,
    scalar_invariants,
    wineman_pipkin_eval,
)
from .mesh import DomeMesh, build_box_mesh, build_dome_mesh
from .network import (
    InputScaler,
    MlpParams,
    NetworkRate,
    detect_constant_collapse,
    feasible_init,
    fit_scaler,
    mlp_forward,
    mlp_gradients,
    mlp_init,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
