"""Trainable multilayer-perceptron damage-rate closures.

The network maps the two scalar invariants seen by the damage closure
(strain-rate norm and damage) to a single damage rate.  Inputs are
standardized by a scaler fitted once on the ground-truth solution; weights
start from a standard normal draw and biases from zero.  Forward evaluation,
reverse-mode parameter gradients, input gradients, and a forward-mode
parameter JVP are implemented directly on the layer arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closures import RateModel
from .errors import ContractViolation, DegenerateData

ACTIVATIONS = ("tanh", "relu", "softplus")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    # softplus, stable for large |z|: log1p(exp(-|z|)) + max(z, 0)
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _act_deriv(name, z):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(float)  # subgradient 0 at z = 0
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class MlpParams:
    """Fully-connected network parameters.

    ``layer_sizes`` runs from the input width to the output width; weights
    are stored as (fan_out, fan_in) matrices.  Parameters flatten to a single
    vector in fixed order (per layer: weights row-major, then biases) and
    round-trip exactly.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ContractViolation("layer count does not match layer_sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ContractViolation("weight/bias shapes do not match layer_sizes")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_flat(cls, flat, layer_sizes, activation) -> "MlpParams":
        flat = np.asarray(flat, dtype=float)
        sizes = tuple(int(s) for s in layer_sizes)
        expected = sum(
            (n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:])
        )
        if flat.size != expected:
            raise ContractViolation(
                f"flat vector has {flat.size} entries, expected {expected}"
            )
        weights, biases, k = [], [], 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[k : k + n_in * n_out].reshape(n_out, n_in).copy())
            k += n_in * n_out
            biases.append(flat[k : k + n_out].copy())
            k += n_out
        return cls(sizes, weights, biases, activation)

    def scaled(self, alpha: float) -> "MlpParams":
        return MlpParams.from_flat(
            alpha * self.flatten(), self.layer_sizes, self.activation
        )


@dataclass(frozen=True)
class InputScaler:
    """Per-invariant standardization to zero mean and unit variance."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise ContractViolation("scaler std must be positive")

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    @classmethod
    def identity(cls, width: int) -> "InputScaler":
        return cls(np.zeros(width), np.ones(width))


def fit_scaler(invariant_batch) -> InputScaler:
    """Mean/population-std scaler from a batch of invariant rows."""
    x = np.asarray(invariant_batch, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation("expected a nonempty (n, k) invariant batch")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if np.any(std <= 0):
        raise DegenerateData("an invariant component has zero variance")
    return InputScaler(mean, std)


def mlp_init(seed: int, layer_sizes, activation: str = "tanh") -> MlpParams:
    """Standard-normal weights, zero biases, from a seeded generator."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or sizes[0] != 2 or sizes[-1] != 1:
        raise ContractViolation("layer_sizes must start at 2 and end at 1")
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((n_out, n_in))
        for n_in, n_out in zip(sizes[:-1], sizes[1:])
    ]
    biases = [np.zeros(n_out) for n_out in sizes[1:]]
    return MlpParams(sizes, weights, biases, activation)


def _forward_trace(params: MlpParams, scaler: InputScaler, batch):
    """Forward pass keeping pre-activations; returns (output, zs, acts)."""
    x = np.asarray(batch, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.layer_sizes[0]:
        raise ContractViolation(
            f"batch has {x.shape[1]} inputs, network expects {params.layer_sizes[0]}"
        )
    a = scaler.apply(x)
    acts, zs = [a], []
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if k == n_layers - 1 else _act(params.activation, z)
        acts.append(a)
    return a, zs, acts


def mlp_forward(params: MlpParams, scaler: InputScaler, invariant_batch) -> np.ndarray:
    """Network outputs for a batch of invariant rows, shape (n,)."""
    if params.layer_sizes[-1] != 1:
        raise ContractViolation("mlp_forward expects a single-output network")
    out, _, _ = _forward_trace(params, scaler, invariant_batch)
    return out[:, 0]


def mlp_gradients(
    params: MlpParams, scaler: InputScaler, invariant_batch, output_cotangents
) -> np.ndarray:
    """Exact gradient of sum(cotangent * output) wrt the flattened parameters."""
    cot = np.asarray(output_cotangents, dtype=float)
    out, zs, acts = _forward_trace(params, scaler, invariant_batch)
    if cot.ndim == 1:
        cot = cot[:, None]
    if cot.shape != out.shape:
        raise ContractViolation("cotangent shape does not match forward output")
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    delta = cot
    for k in range(n_layers - 1, -1, -1):
        grad_w[k] = delta.T @ acts[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k]) * _act_deriv(
                params.activation, zs[k - 1]
            )
    parts = []
    for gw, gb in zip(grad_w, grad_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def mlp_input_gradients(
    params: MlpParams, scaler: InputScaler, invariant_batch
) -> np.ndarray:
    """d(output)/d(raw inputs) per batch row, shape (n, n_inputs)."""
    out, zs, acts = _forward_trace(params, scaler, invariant_batch)
    n_layers = len(params.weights)
    delta = np.ones_like(out)
    for k in range(n_layers - 1, 0, -1):
        delta = (delta @ params.weights[k]) * _act_deriv(params.activation, zs[k - 1])
    dx_scaled = delta @ params.weights[0]
    return dx_scaled / scaler.std


def mlp_param_jvp(
    params: MlpParams, scaler: InputScaler, invariant_batch, direction
) -> np.ndarray:
    """Forward-mode directional derivative of the outputs wrt the parameters."""
    d = MlpParams.from_flat(direction, params.layer_sizes, params.activation)
    x = np.asarray(invariant_batch, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    a = scaler.apply(x)
    a_dot = np.zeros_like(a)
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        z_dot = a @ d.weights[k].T + a_dot @ w.T + d.biases[k]
        if k == n_layers - 1:
            a, a_dot = z, z_dot
        else:
            a = _act(params.activation, z)
            a_dot = _act_deriv(params.activation, z) * z_dot
    return a_dot[:, 0]


def feasible_init(candidate: MlpParams, probe) -> MlpParams:
    """Scale a candidate toward zero until ``probe`` accepts it.

    Tries alpha = 1, 1/2, ..., 2**-20 on the flattened vector and returns the
    first (largest) accepted scaling; falls back to all-zero parameters,
    which the caller guarantees to be solvable.
    """
    for k in range(21):
        scaled = candidate.scaled(0.5**k)
        if probe(scaled):
            return scaled
    return candidate.scaled(0.0)


def detect_constant_collapse(
    params: MlpParams, scaler: InputScaler, probe_grid
) -> bool:
    """True when the network is constant over the probe grid.

    The criterion is a relative output spread below 1e-8, which catches the
    dead-unit failure mode of badly initialized piecewise-linear activations.
    """
    out = mlp_forward(params, scaler, probe_grid)
    return float(out.std()) < 1e-8 * (1.0 + float(np.abs(out).mean()))


class NetworkRate(RateModel):
    """Damage-rate closure backed by an MLP over (J2, phi)."""

    def __init__(self, params: MlpParams, scaler: InputScaler):
        self.params = params
        self.scaler = scaler

    @property
    def n_params(self) -> int:
        return self.params.n_params

    def get_params(self) -> np.ndarray:
        return self.params.flatten()

    def set_params(self, theta) -> None:
        self.params = MlpParams.from_flat(
            theta, self.params.layer_sizes, self.params.activation
        )

    def _batch(self, J2, phi):
        J2 = np.asarray(J2, dtype=float).ravel()
        phi = np.asarray(phi, dtype=float).ravel()
        return np.column_stack([J2, phi])

    def values(self, J2, phi):
        shape = np.asarray(J2, dtype=float).shape
        out = mlp_forward(self.params, self.scaler, self._batch(J2, phi))
        return out.reshape(shape)

    def derivs(self, J2, phi):
        shape = np.asarray(J2, dtype=float).shape
        batch = self._batch(J2, phi)
        s = mlp_forward(self.params, self.scaler, batch)
        din = mlp_input_gradients(self.params, self.scaler, batch)
        return s.reshape(shape), din[:, 0].reshape(shape), din[:, 1].reshape(shape)

    def param_gradient(self, J2, phi, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=float).ravel()
        return mlp_gradients(self.params, self.scaler, self._batch(J2, phi), cot)

    def param_jvp(self, J2, phi, direction):
        shape = np.asarray(J2, dtype=float).shape
        out = mlp_param_jvp(self.params, self.scaler, self._batch(J2, phi), direction)
        return out.reshape(shape)
