import numpy as np
import pytest

from icefit.errors import ContractViolation
from icefit.invariants import (
    ConstitutiveRelation,
    InvariantBasis,
    TensorSignature,
    batch_eval,
    form_invariants,
    pack,
    random_rotation,
    scalar_invariants,
    scalar_signature,
    symmetric_signature,
    unpack,
    wineman_pipkin_eval,
)

SYM2 = symmetric_signature(2)
SYM3 = symmetric_signature(3)


def glen_coeffs(mu=1.0, n=3.0, eps_reg=0.0, dim=2):
    def coeff(J, params):
        j2 = J[..., 1]
        f = mu * (j2 * j2 + eps_reg) ** ((1.0 / n - 1.0) / 2.0)
        zero = np.zeros_like(f)
        cols = [zero, f] if dim == 2 else [zero, f, zero]
        return np.stack(cols, axis=-1)

    return coeff


def test_packed_sizes():
    assert SYM2.packed_size == 3
    assert SYM3.packed_size == 6
    assert scalar_signature().packed_size == 1


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(0)
    for dim in (2, 3):
        a = rng.standard_normal((dim, dim))
        a = 0.5 * (a + a.T)
        assert np.array_equal(unpack(pack(a), dim), a)


def test_basis_counts_2d_3d():
    basis2 = InvariantBasis((SYM2,), SYM2)
    assert basis2.scalar_invariant_count == 2
    assert basis2.form_invariant_count == 2
    basis3 = InvariantBasis((SYM3,), SYM3)
    assert basis3.scalar_invariant_count == 3
    assert basis3.form_invariant_count == 3


def test_scalar_invariants_zero_tensor():
    J = scalar_invariants((SYM2,), (pack(np.zeros((2, 2))),))
    assert np.array_equal(J, [0.0, 0.0])


def test_scalar_invariants_identity():
    J = scalar_invariants((SYM2,), (pack(np.eye(2)),))
    assert np.allclose(J, [2.0, np.sqrt(2.0)], rtol=0, atol=1e-15)


def test_scalar_invariants_diag_1_m1():
    # tr A = 0, sqrt(tr A^2) = sqrt(2), by direct evaluation of the traces
    J = scalar_invariants((SYM2,), (pack(np.diag([1.0, -1.0])),))
    assert np.allclose(J, [0.0, np.sqrt(2.0)], rtol=0, atol=1e-15)


def test_scalar_invariants_appends_state_scalar():
    J = scalar_invariants(
        (SYM2, scalar_signature()), (pack(np.eye(2)), np.array(0.25))
    )
    assert J.shape == (3,)
    assert J[2] == 0.25


def test_scalar_invariants_signature_mismatch():
    with pytest.raises(ContractViolation):
        scalar_invariants((SYM2,), (np.zeros(4),))
    with pytest.raises(ContractViolation):
        scalar_invariants((SYM2, scalar_signature()), (pack(np.eye(2)),))


def test_form_invariants_diag():
    G = form_invariants((SYM2,), (pack(np.diag([1.0, -1.0])),), SYM2)
    assert np.array_equal(unpack(G[0], 2), np.eye(2))
    assert np.array_equal(unpack(G[1], 2), np.diag([1.0, -1.0]))


def test_form_invariants_3d_identity():
    G = form_invariants((SYM3,), (pack(np.eye(3)),), SYM3)
    for g in G:
        assert np.allclose(unpack(g, 3), np.eye(3))


def test_form_invariants_offdiag():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    G = form_invariants((SYM2,), (pack(a),), SYM2)
    assert np.array_equal(unpack(G[1], 2), a)


def test_wineman_pipkin_zero_coefficients():
    cr = ConstitutiveRelation(
        (SYM2,), SYM2, lambda J, p: np.zeros(J.shape[:-1] + (2,))
    )
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 2))
    out = wineman_pipkin_eval(cr, (pack(0.5 * (a + a.T)),))
    assert np.array_equal(out, np.zeros(3))


def test_wineman_pipkin_identity_coefficient():
    def coeff(J, p):
        c = np.zeros(J.shape[:-1] + (2,))
        c[..., 0] = 1.0
        return c

    cr = ConstitutiveRelation((SYM2,), SYM2, coeff)
    out = wineman_pipkin_eval(cr, (pack(np.diag([3.0, -7.0])),))
    assert np.array_equal(unpack(out, 2), np.eye(2))


def test_wineman_pipkin_glen_hand_value():
    # n=3, mu=1: tau = (tr e^2)^(-1/3) e = 2^(-1/3) diag(1, -1)
    cr = ConstitutiveRelation((SYM2,), SYM2, glen_coeffs())
    out = unpack(wineman_pipkin_eval(cr, (pack(np.diag([1.0, -1.0])),)), 2)
    expect = 2.0 ** (-1.0 / 3.0) * np.diag([1.0, -1.0])
    assert np.allclose(out, expect, rtol=1e-14, atol=0)


def test_coefficient_count_mismatch():
    cr = ConstitutiveRelation(
        (SYM2,), SYM2, lambda J, p: np.zeros(J.shape[:-1] + (3,))
    )
    with pytest.raises(ContractViolation):
        wineman_pipkin_eval(cr, (pack(np.eye(2)),))


def test_batch_eval_empty_and_singleton():
    cr = ConstitutiveRelation((SYM2,), SYM2, glen_coeffs())
    empty = batch_eval(cr, (np.zeros((0, 3)),))
    assert empty.shape == (0, 3)
    one = pack(np.diag([1.0, -1.0]))[None, :]
    single = batch_eval(cr, (one,))
    assert np.array_equal(single[0], wineman_pipkin_eval(cr, (one[0],)))


def test_batch_eval_matches_scalar_path_bitwise():
    rng = np.random.default_rng(42)
    a = rng.standard_normal((100, 2, 2))
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    packed = pack(a)
    phi = rng.uniform(0.0, 1.0, 100)

    def coeff(J, p):
        j2 = J[..., 1]
        f = (1.0 - 0.999 * J[..., 2]) * (j2 * j2 + 1e-12) ** (-1.0 / 3.0)
        return np.stack([np.zeros_like(f), f], axis=-1)

    cr = ConstitutiveRelation((SYM2, scalar_signature()), SYM2, coeff)
    batched = batch_eval(cr, (packed, phi))
    rows = np.stack(
        [wineman_pipkin_eval(cr, (packed[i], phi[i])) for i in range(100)]
    )
    assert np.array_equal(batched, rows)


def test_scalar_invariants_rotation_invariant():
    rng = np.random.default_rng(7)
    for dim, sig in ((2, SYM2), (3, SYM3)):
        for _ in range(200):
            a = rng.standard_normal((dim, dim))
            a = 0.5 * (a + a.T)
            q = random_rotation(rng, dim)
            J = scalar_invariants((sig,), (pack(a),))
            Jr = scalar_invariants((sig,), (pack(q @ a @ q.T),))
            assert np.allclose(Jr, J, rtol=1e-12, atol=1e-12)


def test_wineman_pipkin_equivariance():
    rng = np.random.default_rng(11)
    cr = ConstitutiveRelation((SYM2,), SYM2, glen_coeffs(mu=0.7, n=3.0, eps_reg=1e-12))
    for _ in range(200):
        a = rng.standard_normal((2, 2))
        a = 0.5 * (a + a.T)
        q = random_rotation(rng, 2)
        out = unpack(wineman_pipkin_eval(cr, (pack(a),)), 2)
        out_rot = unpack(wineman_pipkin_eval(cr, (pack(q @ a @ q.T),)), 2)
        assert np.allclose(out_rot, q @ out @ q.T, rtol=1e-10, atol=1e-12)


def test_rotations_are_orthogonal():
    rng = np.random.default_rng(3)
    for dim in (2, 3):
        q = random_rotation(rng, dim)
        assert np.allclose(q @ q.T, np.eye(dim), atol=1e-12)
        assert np.isclose(np.linalg.det(q), 1.0, atol=1e-12)
