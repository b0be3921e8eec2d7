import numpy as np
import pytest

from icefit.errors import ContractViolation, DegenerateData
from icefit.network import (
    InputScaler,
    MlpParams,
    NetworkRate,
    detect_constant_collapse,
    feasible_init,
    fit_scaler,
    mlp_forward,
    mlp_gradients,
    mlp_init,
    mlp_input_gradients,
    mlp_param_jvp,
)

IDENT2 = InputScaler.identity(2)


class TestInit:
    def test_deterministic(self):
        a = mlp_init(7, (2, 4, 1))
        b = mlp_init(7, (2, 4, 1))
        assert np.array_equal(a.flatten(), b.flatten())

    def test_different_seeds_differ(self):
        a = mlp_init(1, (2, 4, 1))
        b = mlp_init(2, (2, 4, 1))
        assert not np.array_equal(a.flatten(), b.flatten())

    def test_parameter_count(self):
        # (2,4,4,4,1): 2*4+4 + 4*4+4 + 4*4+4 + 4*1+1 = 57
        net = mlp_init(0, (2, 4, 4, 4, 1))
        assert net.n_params == 57
        assert net.flatten().size == 57

    def test_biases_zero(self):
        net = mlp_init(3, (2, 4, 4, 1))
        for b in net.biases:
            assert np.array_equal(b, np.zeros_like(b))

    def test_zero_params_give_zero_output(self):
        for act in ("tanh", "relu"):
            net = mlp_init(0, (2, 4, 1), act).scaled(0.0)
            out = mlp_forward(net, IDENT2, np.random.default_rng(0).normal(size=(9, 2)))
            assert np.array_equal(out, np.zeros(9))

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ContractViolation):
            mlp_init(0, (3, 4, 1))
        with pytest.raises(ContractViolation):
            mlp_init(0, (2, 4, 2))
        with pytest.raises(ContractViolation):
            mlp_init(0, (2,))


class TestFlatten:
    @pytest.mark.parametrize("sizes", [(2, 1), (2, 2, 1), (2, 4, 4, 4, 1)])
    def test_roundtrip_exact(self, sizes):
        net = mlp_init(11, sizes, "softplus")
        flat = net.flatten()
        rebuilt = MlpParams.from_flat(flat, sizes, "softplus")
        assert np.array_equal(rebuilt.flatten(), flat)
        for w1, w2 in zip(net.weights, rebuilt.weights):
            assert np.array_equal(w1, w2)

    def test_wrong_length_rejected(self):
        with pytest.raises(ContractViolation):
            MlpParams.from_flat(np.zeros(5), (2, 2, 1), "tanh")


class TestScaler:
    def test_hand_statistics(self):
        # batch {0, 2} per component: mean 1, population std 1
        batch = np.array([[0.0, 0.0], [2.0, 2.0]])
        sc = fit_scaler(batch)
        assert np.array_equal(sc.mean, [1.0, 1.0])
        assert np.array_equal(sc.std, [1.0, 1.0])

    def test_scaled_batch_standardized(self):
        rng = np.random.default_rng(5)
        batch = rng.normal(3.0, 2.5, size=(500, 2))
        sc = fit_scaler(batch)
        scaled = sc.apply(batch)
        assert np.all(np.abs(scaled.mean(axis=0)) < 1e-12)
        assert np.all(np.abs(scaled.std(axis=0) - 1.0) < 1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(DegenerateData):
            fit_scaler(np.ones((10, 2)))

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            fit_scaler(np.zeros((0, 2)))


class TestForward:
    def test_affine_network(self):
        # single linear layer: output = a J1 + b J2 + c
        net = MlpParams((2, 1), [np.array([[2.0, -3.0]])], [np.array([0.5])])
        x = np.array([[1.0, 1.0], [0.0, 2.0]])
        out = mlp_forward(net, IDENT2, x)
        assert np.allclose(out, [2.0 - 3.0 + 0.5, -6.0 + 0.5])

    def test_batch_equals_rowwise(self):
        # matmul kernels may associate sums differently per batch size, so
        # rowwise agreement is to rounding, not bitwise
        net = mlp_init(4, (2, 4, 4, 1), "softplus")
        rng = np.random.default_rng(6)
        x = rng.normal(size=(50, 2))
        batch = mlp_forward(net, IDENT2, x)
        rows = np.array([mlp_forward(net, IDENT2, x[i : i + 1])[0] for i in range(50)])
        assert np.allclose(batch, rows, rtol=1e-13, atol=1e-15)

    def test_arity_mismatch(self):
        net = mlp_init(0, (2, 2, 1))
        with pytest.raises(ContractViolation):
            mlp_forward(net, IDENT2, np.zeros((4, 3)))

    def test_tanh_output_bound(self):
        # final layer sees activations in [-1, 1]
        rng = np.random.default_rng(7)
        for seed in range(10):
            net = mlp_init(seed, (2, 4, 4, 1), "tanh")
            w_last, b_last = net.weights[-1], net.biases[-1]
            bound = np.abs(w_last).sum() + np.abs(b_last).sum()
            x = rng.normal(scale=5.0, size=(200, 2))
            out = mlp_forward(net, IDENT2, x)
            assert np.all(np.abs(out) <= bound + 1e-12)


class TestGradients:
    @staticmethod
    def _activation_pattern(net, x):
        from icefit.network import _forward_trace

        _, zs, _ = _forward_trace(net, IDENT2, x)
        return [z > 0 for z in zs]

    @pytest.mark.parametrize("act", ["tanh", "relu", "softplus"])
    @pytest.mark.parametrize("sizes", [(2, 2, 1), (2, 4, 4, 1)])
    def test_matches_finite_differences(self, act, sizes):
        # central differences are only a valid oracle where the map is
        # differentiable; perturbations that flip a ReLU activation pattern
        # cross the subgradient jump and are skipped
        rng = np.random.default_rng(8)
        net = mlp_init(3, sizes, act)
        x = rng.normal(size=(20, 2))
        cot = rng.normal(size=20)
        grad = mlp_gradients(net, IDENT2, x, cot)
        flat = net.flatten()
        h = 1e-6
        checked = 0
        for k in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            ep = flat.copy()
            ep[k] += h
            em = flat.copy()
            em[k] -= h
            net_p = MlpParams.from_flat(ep, sizes, act)
            net_m = MlpParams.from_flat(em, sizes, act)
            if act == "relu":
                pat_p = self._activation_pattern(net_p, x)
                pat_m = self._activation_pattern(net_m, x)
                if any(np.any(a != b) for a, b in zip(pat_p, pat_m)):
                    continue
            fp = (cot * mlp_forward(net_p, IDENT2, x)).sum()
            fm = (cot * mlp_forward(net_m, IDENT2, x)).sum()
            fd = (fp - fm) / (2 * h)
            assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)
            checked += 1
        assert checked >= 5

    def test_zero_cotangents(self):
        net = mlp_init(0, (2, 2, 1))
        g = mlp_gradients(net, IDENT2, np.zeros((5, 2)), np.zeros(5))
        assert np.array_equal(g, np.zeros(net.n_params))

    def test_affine_bias_gradient_is_cotangent_sum(self):
        net = MlpParams((2, 1), [np.array([[1.0, 2.0]])], [np.array([0.0])])
        rng = np.random.default_rng(9)
        cot = rng.normal(size=12)
        g = mlp_gradients(net, IDENT2, rng.normal(size=(12, 2)), cot)
        assert g[-1] == pytest.approx(cot.sum(), rel=1e-14)

    def test_input_gradients_fd(self):
        net = mlp_init(5, (2, 4, 1), "tanh")
        sc = InputScaler(np.array([0.5, -0.2]), np.array([2.0, 0.7]))
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 2))
        din = mlp_input_gradients(net, sc, x)
        h = 1e-6
        for j in range(2):
            xp = x.copy()
            xp[:, j] += h
            xm = x.copy()
            xm[:, j] -= h
            fd = (mlp_forward(net, sc, xp) - mlp_forward(net, sc, xm)) / (2 * h)
            assert np.allclose(din[:, j], fd, rtol=1e-6, atol=1e-9)

    def test_param_jvp_matches_gradient(self):
        net = mlp_init(6, (2, 4, 4, 1), "softplus")
        rng = np.random.default_rng(11)
        x = rng.normal(size=(15, 2))
        d = rng.normal(size=net.n_params)
        jvp = mlp_param_jvp(net, IDENT2, x, d)
        # <jvp, cot> == <grad(cot), d> for any cotangent
        cot = rng.normal(size=15)
        lhs = float(cot @ jvp)
        rhs = float(mlp_gradients(net, IDENT2, x, cot) @ d)
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestFeasibleInit:
    def test_probe_always_true(self):
        net = mlp_init(0, (2, 2, 1))
        out = feasible_init(net, lambda p: True)
        assert np.array_equal(out.flatten(), net.flatten())

    def test_scales_until_accepted(self):
        net = mlp_init(0, (2, 2, 1))
        ref = np.linalg.norm(net.flatten())

        def probe(p):
            return np.linalg.norm(p.flatten()) <= ref / 4.0 + 1e-12

        out = feasible_init(net, probe)
        assert np.linalg.norm(out.flatten()) == pytest.approx(ref / 4.0, rel=1e-12)

    def test_zero_fallback(self):
        net = mlp_init(0, (2, 2, 1))

        def probe(p):
            return not np.any(p.flatten())

        out = feasible_init(net, probe)
        assert np.array_equal(out.flatten(), np.zeros(net.n_params))

    def test_result_always_passes_probe(self):
        rng = np.random.default_rng(12)
        for seed in range(20):
            net = mlp_init(seed, (2, 4, 1), "softplus")
            cut = rng.uniform(0.1, 3.0)
            probe = lambda p: np.linalg.norm(p.flatten()) < cut  # noqa: E731
            assert probe(feasible_init(net, probe))


class TestCollapse:
    GRID = np.column_stack(
        [np.linspace(0, 5, 40).repeat(8), np.tile(np.linspace(0, 1, 8), 40)]
    )

    def test_zero_network_collapsed(self):
        net = mlp_init(0, (2, 4, 1), "relu").scaled(0.0)
        assert detect_constant_collapse(net, IDENT2, self.GRID)

    def test_affine_not_collapsed(self):
        net = MlpParams((2, 1), [np.array([[1.0, 0.5]])], [np.array([0.0])])
        assert not detect_constant_collapse(net, IDENT2, self.GRID)

    def test_dead_relu_collapsed(self):
        # large negative first-layer biases kill every unit on the grid
        net = mlp_init(1, (2, 4, 1), "relu")
        net.biases[0][:] = -1e3
        assert detect_constant_collapse(net, IDENT2, self.GRID)
        out = mlp_forward(net, IDENT2, self.GRID)
        assert np.array_equal(out, np.full(len(self.GRID), out[0]))


class TestNetworkRate:
    def test_shape_preservation(self):
        rate = NetworkRate(mlp_init(2, (2, 2, 1)), IDENT2)
        j2 = np.linspace(0, 3, 12).reshape(3, 4)
        phi = np.full((3, 4), 0.5)
        assert rate.values(j2, phi).shape == (3, 4)
        s, dj, dp = rate.derivs(j2, phi)
        assert s.shape == dj.shape == dp.shape == (3, 4)

    def test_param_roundtrip(self):
        rate = NetworkRate(mlp_init(3, (2, 4, 1)), IDENT2)
        theta = rate.get_params()
        rate.set_params(theta * 2.0)
        assert np.array_equal(rate.get_params(), theta * 2.0)
