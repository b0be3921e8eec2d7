r"""Scalar/form invariants of symmetric tensors and isotropic function evaluation.

A frame-invariant tensor function can be written as a linear combination of
known rotation-equivariant tensors ("form invariants") with coefficients that
are arbitrary scalar functions of rotation-invariant scalars ("scalar
invariants") of the inputs:

    f(P) = sum_i  c_i(J(P)) G_i(P)

For a single symmetric second-order input A this module uses the fixed bases

    2D:  J = [tr A, sqrt(tr A^2)]           G = [I, A]
    3D:  J = [tr A, sqrt(tr A^2), tr A^3]   G = [I, A, A^2]

Additional scalar state inputs (e.g. a damage variable) are appended verbatim
to J, in declaration order, and contribute no form invariants.  Scalar-valued
outputs have the single form invariant G = [1].

Symmetric tensors are stored in packed layout: diagonal entries first, then
the off-diagonal entries row-wise, i.e. ``[a00, a11, a01]`` in 2D and
``[a00, a11, a22, a01, a02, a12]`` in 3D.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

_PACK_IDX = {
    2: [(0, 0), (1, 1), (0, 1)],
    3: [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)],
}


@dataclass(frozen=True)
class TensorSignature:
    """Order/dimension/symmetry descriptor of one input or output slot."""

    order: int
    dim: int = 2
    symmetric: bool = False

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise ContractViolation(f"unsupported tensor order {self.order}")
        if self.order > 0 and self.dim not in (2, 3):
            raise ContractViolation(f"unsupported dimension {self.dim}")

    @property
    def packed_size(self) -> int:
        if self.order == 0:
            return 1
        if self.order == 1:
            return self.dim
        if self.symmetric:
            return self.dim * (self.dim + 1) // 2
        return self.dim * self.dim


def scalar_signature() -> TensorSignature:
    return TensorSignature(order=0)


def symmetric_signature(dim: int) -> TensorSignature:
    return TensorSignature(order=2, dim=dim, symmetric=True)


def pack(a: np.ndarray) -> np.ndarray:
    """Pack a (..., d, d) symmetric tensor into the fixed component layout."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    idx = _PACK_IDX[d]
    return np.stack([a[..., i, j] for (i, j) in idx], axis=-1)


def unpack(packed: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns the full (..., d, d) array."""
    packed = np.asarray(packed, dtype=float)
    out = np.zeros(packed.shape[:-1] + (dim, dim))
    for k, (i, j) in enumerate(_PACK_IDX[dim]):
        out[..., i, j] = packed[..., k]
        out[..., j, i] = packed[..., k]
    return out


@dataclass(frozen=True)
class InvariantBasis:
    """Tabulated invariant counts for a tuple of input signatures.

    Supported inputs: at most one symmetric second-order tensor plus any
    number of scalar state variables.  The output is either a symmetric
    second-order tensor of the same dimension or a scalar.
    """

    input_signatures: tuple
    output_signature: TensorSignature

    def __post_init__(self):
        tensors = [s for s in self.input_signatures if s.order == 2]
        scalars = [s for s in self.input_signatures if s.order == 0]
        if len(tensors) + len(scalars) != len(self.input_signatures):
            raise ContractViolation("only order-0 and order-2 inputs are tabulated")
        if len(tensors) > 1:
            raise ContractViolation("at most one tensor input is tabulated")
        if tensors and not tensors[0].symmetric:
            raise ContractViolation("tensor input must be symmetric")
        if self.output_signature.order == 2:
            if not tensors:
                raise ContractViolation("tensor output requires a tensor input")
            if not self.output_signature.symmetric:
                raise ContractViolation("tensor output must be symmetric")
            if self.output_signature.dim != tensors[0].dim:
                raise ContractViolation("output dimension must match the input")
        elif self.output_signature.order != 0:
            raise ContractViolation("output must be scalar or symmetric order 2")

    @property
    def dim(self) -> int:
        for s in self.input_signatures:
            if s.order == 2:
                return s.dim
        return 0

    @property
    def scalar_invariant_count(self) -> int:
        n_scalars = sum(1 for s in self.input_signatures if s.order == 0)
        n_tensor = 0 if not self.dim else (2 if self.dim == 2 else 3)
        return n_tensor + n_scalars

    @property
    def form_invariant_count(self) -> int:
        if self.output_signature.order == 0:
            return 1
        return 2 if self.dim == 2 else 3


def scalar_invariants(signatures, inputs) -> np.ndarray:
    """Evaluate J for one tensor input (optional) plus appended scalars.

    ``inputs`` may carry a leading batch axis; the returned array then has
    shape (batch, n_invariants).
    """
    signatures = tuple(signatures)
    if len(inputs) != len(signatures):
        raise ContractViolation(
            f"expected {len(signatures)} inputs, got {len(inputs)}"
        )
    parts = []
    for sig, raw in zip(signatures, inputs):
        x = np.asarray(raw, dtype=float)
        if sig.order == 0:
            parts.append(np.reshape(x, x.shape + (1,)))
        elif sig.order == 2:
            if x.shape[-1] != sig.packed_size:
                raise ContractViolation(
                    f"packed tensor has {x.shape[-1]} components, "
                    f"expected {sig.packed_size}"
                )
            d = sig.dim
            a = unpack(x, d)
            tr = np.trace(a, axis1=-2, axis2=-1)
            tr_a2 = np.einsum("...ij,...ji->...", a, a)
            j = [tr, np.sqrt(tr_a2)]
            if d == 3:
                a3 = np.einsum("...ij,...jk,...ki->...", a, a, a)
                j.append(a3)
            parts.append(np.stack(j, axis=-1))
        else:
            raise ContractViolation("vector inputs have no tabulated invariants")
    return np.concatenate(parts, axis=-1)


def form_invariants(signatures, inputs, output_signature) -> list:
    """Evaluate G (packed) in the fixed tabulated order."""
    basis = InvariantBasis(tuple(signatures), output_signature)
    if output_signature.order == 0:
        shape = _batch_shape(signatures, inputs)
        return [np.ones(shape + (1,))]
    for sig, raw in zip(signatures, inputs):
        if sig.order == 2:
            x = np.asarray(raw, dtype=float)
            d = sig.dim
            a = unpack(x, d)
            eye = np.broadcast_to(np.eye(d), a.shape).copy()
            gs = [pack(eye), pack(a)]
            if d == 3:
                gs.append(pack(a @ a))
            return gs
    raise ContractViolation("tensor output requires a tensor input")


def _batch_shape(signatures, inputs):
    for sig, raw in zip(signatures, inputs):
        x = np.asarray(raw, dtype=float)
        comp = 0 if sig.order == 0 else 1
        return x.shape[: x.ndim - comp]
    return ()


@dataclass
class ConstitutiveRelation:
    """An isotropic tensor function in coefficient form.

    ``coefficients(J, params)`` must return one scalar per form invariant; it
    receives J with whatever leading batch axes the inputs carried.
    """

    input_signatures: tuple
    output_signature: TensorSignature
    coefficients: callable
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.input_signatures = tuple(self.input_signatures)
        self.params = np.asarray(self.params, dtype=float)
        self.basis = InvariantBasis(self.input_signatures, self.output_signature)


def wineman_pipkin_eval(cr: ConstitutiveRelation, inputs) -> np.ndarray:
    """Evaluate sum_i c_i(J) G_i for one input tuple (packed output)."""
    J = scalar_invariants(cr.input_signatures, inputs)
    G = form_invariants(cr.input_signatures, inputs, cr.output_signature)
    c = np.asarray(cr.coefficients(J, cr.params), dtype=float)
    if c.shape[-1] != cr.basis.form_invariant_count:
        raise ContractViolation(
            f"coefficient function returned {c.shape[-1]} values, "
            f"expected {cr.basis.form_invariant_count}"
        )
    out = sum(c[..., i, None] * G[i] for i in range(len(G)))
    if cr.output_signature.order == 0:
        return out[..., 0]
    return out


def batch_eval(cr: ConstitutiveRelation, batched_inputs) -> np.ndarray:
    """:func:`wineman_pipkin_eval` mapped over a leading batch axis.

    Implemented as an explicit row map so results are bitwise identical to
    per-tuple evaluation (vectorized einsum reductions may associate sums
    differently); the row order is fixed, so the result is deterministic.
    """
    batched_inputs = [np.asarray(x, dtype=float) for x in batched_inputs]
    n = batched_inputs[0].shape[0] if batched_inputs else 0
    if n == 0:
        k = cr.output_signature.packed_size
        return np.zeros((0,) if cr.output_signature.order == 0 else (0, k))
    rows = [
        wineman_pipkin_eval(cr, tuple(x[i] for x in batched_inputs))
        for i in range(n)
    ]
    return np.stack(rows)


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Uniformly random rotation matrix (det +1)."""
    if dim == 2:
        t = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s], [s, c]])
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
