"""Network, squash and hybrid-model gradient checks.

The gradient oracle throughout is a central finite difference (h = 1e-5)
of a scalar probe loss; the forward oracle for the MLP is an independent
naive-loop implementation.
"""

import json

import numpy as np
import pytest

from graydrive.dynamics import (
    ControlInput,
    PacejkaCoeffs,
    VehicleParams,
    VehicleState,
    state_derivative,
)
from graydrive.models import (
    BaselineModel,
    CoeffBounds,
    DeepPacejkaModel,
    DimensionMismatch,
    Mlp,
    NormalizationStats,
    checkpoint_dict,
    extract_latent_forces,
    load_checkpoint,
    make_features,
    mlp_backward,
    mlp_forward,
    model_from_dict,
    save_checkpoint,
    sigmoid,
    squash_jacobian,
    squash_to_bounds,
)

PARAMS = VehicleParams()
GT_COEFFS = PacejkaCoeffs.default(PARAMS)


def naive_mlp(net, x):
    """Independent loop-based forward pass used as the oracle."""
    a = list(x)
    n_layers = len(net.weights)
    for li in range(n_layers):
        w, b = net.weights[li], net.biases[li]
        z = [sum(w[i][j] * a[j] for j in range(len(a))) + b[i] for i in range(len(b))]
        a = z if li == n_layers - 1 else [np.tanh(v) for v in z]
    if net.skip is not None:
        a = [a[i] + sum(net.skip[i][j] * x[j] for j in range(len(x)))
             for i in range(len(a))]
    return np.array(a)


def rel_err(a, b):
    return abs(a - b) / (max(abs(a), abs(b)) + 1e-8)


def random_window(rng, h=8):
    hist = rng.normal(size=(h, 5)) * [3.0, 0.4, 0.3, 0.1, 1.0] + [8, 0, 0, 0, 0]
    state = VehicleState(
        x=rng.normal(), y=rng.normal(), psi=rng.normal(),
        vx=rng.uniform(2, 15), vy=rng.normal() * 0.5, omega=rng.normal() * 0.3,
    )
    u = ControlInput(steer=rng.uniform(-0.4, 0.4), accel=rng.uniform(-4, 4))
    return hist, state, u


def raw_for_coeffs(coeffs: PacejkaCoeffs, bounds: CoeffBounds):
    """Inverse of the squash: the raw output that produces exactly coeffs."""
    frac = (coeffs.as_array() - bounds.lo) / (bounds.hi - bounds.lo)
    return np.log(frac / (1.0 - frac))


def dpm_with_fixed_coeffs(coeffs: PacejkaCoeffs, history_len=8) -> DeepPacejkaModel:
    """Zero-weight DPM whose output bias reproduces the given coefficients."""
    model = DeepPacejkaModel.init(PARAMS, history_len=history_len, rng=np.random.default_rng(0))
    for w in model.net.weights:
        w[:] = 0.0
    model.net.biases[-1][:] = raw_for_coeffs(coeffs, model.bounds)
    return model


class TestMlp:
    def test_zero_weight_net_outputs_last_bias(self):
        net = Mlp.init([4, 3, 2], np.random.default_rng(0))
        for w in net.weights:
            w[:] = 0.0
        net.biases[-1][:] = [1.5, -2.0]
        out, _ = mlp_forward(net, np.ones(4))
        np.testing.assert_array_equal(out, [1.5, -2.0])

    def test_single_linear_identity(self):
        net = Mlp([np.eye(3)], [np.zeros(3)])
        x = np.array([0.3, -1.2, 2.0])
        out, _ = mlp_forward(net, x)
        np.testing.assert_array_equal(out, x)

    def test_forward_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            net = Mlp.init([6, 5, 4, 3], rng)
            net.skip[:] = rng.normal(size=net.skip.shape)
            x = rng.normal(size=6)
            out, _ = mlp_forward(net, x)
            np.testing.assert_allclose(out, naive_mlp(net, x), atol=1e-12, rtol=0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        net = Mlp.init([5, 8, 2], rng)
        xs = rng.normal(size=(7, 5))
        batch, _ = mlp_forward(net, xs)
        for i in range(7):
            single, _ = mlp_forward(net, xs[i])
            # batched matmul may reduce in a different order than matvec
            np.testing.assert_allclose(batch[i], single, rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch(self):
        net = Mlp.init([5, 3], np.random.default_rng(0))
        with pytest.raises(DimensionMismatch):
            mlp_forward(net, np.zeros(4))

    def test_backward_zero_grad(self):
        net = Mlp.init([4, 6, 2], np.random.default_rng(3))
        _, cache = mlp_forward(net, np.ones(4))
        grads, gin = mlp_backward(net, cache, np.zeros(2))
        assert all(np.all(g == 0) for g in grads.param_list())
        assert np.all(gin == 0)

    def test_backward_linearity(self):
        rng = np.random.default_rng(4)
        net = Mlp.init([4, 6, 2], rng)
        _, cache = mlp_forward(net, rng.normal(size=4))
        g = rng.normal(size=2)
        g1, _ = mlp_backward(net, cache, g)
        g2, _ = mlp_backward(net, cache, 2.0 * g)
        for a, b in zip(g1.param_list(), g2.param_list()):
            np.testing.assert_allclose(2.0 * a, b, rtol=1e-14)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        net = Mlp.init([5, 7, 4, 2], rng)
        x = rng.normal(size=5)
        probe = rng.normal(size=2)
        out, cache = mlp_forward(net, x)
        grads, grad_in = mlp_backward(net, cache, probe)
        h = 1e-5

        def loss():
            return float(mlp_forward(net, x)[0] @ probe)

        for p, g in zip(net.param_list(), grads.param_list()):
            flat_p, flat_g = p.ravel(), g.ravel()
            for idx in range(0, flat_p.size, max(1, flat_p.size // 17)):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                up = loss()
                flat_p[idx] = orig - h
                dn = loss()
                flat_p[idx] = orig
                assert rel_err(flat_g[idx], (up - dn) / (2 * h)) < 1e-5

        for idx in range(5):
            xs = x.copy()
            xs[idx] += h
            up = float(mlp_forward(net, xs)[0] @ probe)
            xs[idx] -= 2 * h
            dn = float(mlp_forward(net, xs)[0] @ probe)
            assert rel_err(grad_in[idx], (up - dn) / (2 * h)) < 1e-5


class TestSquash:
    BOUNDS = CoeffBounds.default(PARAMS)

    def test_zero_raw_gives_midpoints(self):
        mid = squash_to_bounds(np.zeros(8), self.BOUNDS)
        np.testing.assert_allclose(mid, 0.5 * (self.BOUNDS.lo + self.BOUNDS.hi), rtol=1e-15)

    def test_saturation(self):
        hi = squash_to_bounds(np.full(8, 50.0), self.BOUNDS)
        lo = squash_to_bounds(np.full(8, -50.0), self.BOUNDS)
        span = self.BOUNDS.hi - self.BOUNDS.lo
        assert np.all(np.abs(hi - self.BOUNDS.hi) < 1e-9 * span)
        assert np.all(np.abs(lo - self.BOUNDS.lo) < 1e-9 * span)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        h = 1e-6
        for _ in range(20):
            raw = rng.normal(size=8) * 3
            jac = squash_jacobian(raw, self.BOUNDS)
            fd = (squash_to_bounds(raw + h, self.BOUNDS) - squash_to_bounds(raw - h, self.BOUNDS)) / (2 * h)
            np.testing.assert_allclose(jac, fd, rtol=1e-6)

    def test_outputs_always_in_bounds(self):
        rng = np.random.default_rng(7)
        raw = rng.normal(size=(100, 8)) * 10
        c = squash_to_bounds(raw, self.BOUNDS)
        assert np.all(c > self.BOUNDS.lo) and np.all(c < self.BOUNDS.hi)


class TestDeepPacejkaModel:
    def test_ground_truth_coeffs_reproduce_simulator(self):
        model = dpm_with_fixed_coeffs(GT_COEFFS)
        rng = np.random.default_rng(8)
        for _ in range(20):
            hist, state, u = random_window(rng)
            out = model.forward(hist, state, u)
            truth = state_derivative(state, u, GT_COEFFS, PARAMS)[3:6]
            np.testing.assert_allclose(out.deriv, truth, atol=1e-12, rtol=0)

    def test_zero_slip_forces_zero_lateral_derivatives(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            model = DeepPacejkaModel.init(PARAMS, rng=rng)
            hist = rng.normal(size=(8, 5))
            state = VehicleState(vx=rng.uniform(1, 20))
            u = ControlInput(steer=0.0, accel=rng.uniform(-3, 3))
            out = model.forward(hist, state, u)
            assert out.deriv[1] == 0.0 and out.deriv[2] == 0.0

    def test_gradient_through_physics_matches_fd(self):
        rng = np.random.default_rng(10)
        model = DeepPacejkaModel.init(PARAMS, hidden=(16,), rng=rng)
        hist, state, u = random_window(rng)
        probe = rng.normal(size=3)
        out, cache = model.forward_cached(hist, state, u)
        grads = model.backward(cache, probe)
        h = 1e-5

        def loss():
            return float(model.forward(hist, state, u).deriv @ probe)

        floor = 1e-6 * max(1.0, abs(loss()))
        checked = 0
        for p, g in zip(model.net.param_list(), grads.param_list()):
            flat_p, flat_g = p.ravel(), g.ravel()
            for idx in range(0, flat_p.size, max(1, flat_p.size // 11)):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                up = loss()
                flat_p[idx] = orig - h
                dn = loss()
                flat_p[idx] = orig
                fd = (up - dn) / (2 * h)
                if max(abs(fd), abs(flat_g[idx])) > floor:
                    assert rel_err(flat_g[idx], fd) < 1e-4
                    checked += 1
                else:
                    assert abs(flat_g[idx] - fd) < floor
        assert checked > 20

    def test_structural_zero_gradient(self):
        # with steer = 0, vx' does not depend on the lateral forces at all
        rng = np.random.default_rng(11)
        model = DeepPacejkaModel.init(PARAMS, rng=rng)
        hist = rng.normal(size=(8, 5))
        state = VehicleState(vx=9.0, vy=0.4, omega=0.2)
        u = ControlInput(steer=0.0, accel=1.0)
        _, cache = model.forward_cached(hist, state, u)
        grads = model.backward(cache, np.array([1.0, 0.0, 0.0]))
        assert all(np.all(g == 0) for g in grads.param_list())

    def test_gradient_sum_rule(self):
        rng = np.random.default_rng(12)
        model = DeepPacejkaModel.init(PARAMS, rng=rng)
        hist, state, u = random_window(rng)
        _, cache = model.forward_cached(hist, state, u)
        g1 = rng.normal(size=3)
        g2 = rng.normal(size=3)
        sep = model.backward(cache, g1).add_(model.backward(cache, g2))
        joint = model.backward(cache, g1 + g2)
        for a, b in zip(sep.param_list(), joint.param_list()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_forces_bounded_by_predicted_peaks_for_any_weights(self):
        rng = np.random.default_rng(13)
        bounds = CoeffBounds.default(PARAMS)
        for _ in range(30):
            model = DeepPacejkaModel.init(PARAMS, rng=rng)
            for w in model.net.weights:
                w *= rng.uniform(0.5, 5.0)
            hist, state, u = random_window(rng)
            out = model.forward(hist, state, u)
            d_hat = out.coeffs[bounds.peak_indices]
            assert abs(out.tire[2]) <= d_hat[0] <= bounds.hi[2]
            assert abs(out.tire[3]) <= d_hat[1] <= bounds.hi[6]

    def test_mirror_symmetry_with_constant_coeffs(self):
        model = dpm_with_fixed_coeffs(GT_COEFFS)
        rng = np.random.default_rng(14)
        hist, state, u = random_window(rng)
        mirror_hist = hist * [1, -1, -1, -1, 1]
        mirror_state = VehicleState(state.x, -state.y, -state.psi, state.vx, -state.vy, -state.omega)
        mirror_u = ControlInput(-u.steer, u.accel)
        out = model.forward(hist, state, u)
        out_m = model.forward(mirror_hist, mirror_state, mirror_u)
        np.testing.assert_allclose(out_m.deriv, out.deriv * [1, -1, -1], atol=1e-12)

    def test_batched_forward_matches_single(self):
        rng = np.random.default_rng(15)
        model = DeepPacejkaModel.init(PARAMS, rng=rng)
        hists = rng.normal(size=(9, 8, 5))
        states = rng.normal(size=(9, 6)) + [0, 0, 0, 8, 0, 0]
        us = rng.normal(size=(9, 2)) * [0.2, 2]
        out = model.forward(hists, states, us)
        for i in range(9):
            single = model.forward(hists[i], states[i], us[i])
            np.testing.assert_allclose(out.deriv[i], single.deriv, atol=0)
            np.testing.assert_allclose(out.coeffs[i], single.coeffs, atol=0)


class TestBaselineModel:
    def test_zero_weight_net_predicts_bias(self):
        model = BaselineModel.init(PARAMS, rng=np.random.default_rng(16))
        for w in model.net.weights:
            w[:] = 0.0
        model.net.biases[-1][:] = [0.5, -0.25, 0.1]
        hist, state, u = random_window(np.random.default_rng(17))
        np.testing.assert_allclose(model.forward(hist, state, u), [0.5, -0.25, 0.1])

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(18)
        model = BaselineModel.init(PARAMS, hidden=(12,), rng=rng)
        model.stats = NormalizationStats(
            np.zeros(5), np.ones(5), rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        )
        hist, state, u = random_window(rng)
        probe = rng.normal(size=3)
        _, cache = model.forward_cached(hist, state, u)
        grads = model.backward(cache, probe)
        h = 1e-5

        def loss():
            return float(model.forward(hist, state, u) @ probe)

        # gradients below the central-difference noise floor cannot be
        # verified at 1e-5 relative; compare those absolutely instead
        floor = 1e-6 * max(1.0, abs(loss()))
        checked = 0
        for p, g in zip(model.net.param_list(), grads.param_list()):
            flat_p, flat_g = p.ravel(), g.ravel()
            for idx in range(0, flat_p.size, max(1, flat_p.size // 9)):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                up = loss()
                flat_p[idx] = orig - h
                dn = loss()
                flat_p[idx] = orig
                fd = (up - dn) / (2 * h)
                if max(abs(fd), abs(flat_g[idx])) > floor:
                    assert rel_err(flat_g[idx], fd) < 1e-5
                    checked += 1
                else:
                    assert abs(flat_g[idx] - fd) < floor
        assert checked > 20

    def test_pure_function(self):
        rng = np.random.default_rng(19)
        model = BaselineModel.init(PARAMS, rng=rng)
        hist, state, u = random_window(rng)
        a = model.forward(hist, state, u)
        b = model.forward(hist, state, u)
        np.testing.assert_array_equal(a, b)


class TestLatentForces:
    def test_straight_driving_zero_forces(self):
        model = dpm_with_fixed_coeffs(GT_COEFFS)
        out = model.forward(np.zeros((8, 5)), VehicleState(vx=10.0), ControlInput())
        fy = extract_latent_forces(out)
        assert fy[2] == 0.0 and fy[3] == 0.0

    def test_ground_truth_injection_matches_simulator_forces(self):
        from graydrive.dynamics import lateral_forces

        model = dpm_with_fixed_coeffs(GT_COEFFS)
        rng = np.random.default_rng(20)
        for _ in range(10):
            hist, state, u = random_window(rng)
            out = model.forward(hist, state, u)
            truth = np.stack(lateral_forces(state.as_array(), u.steer, GT_COEFFS, PARAMS))
            np.testing.assert_allclose(extract_latent_forces(out), truth, atol=1e-12)


class TestRefinement:
    def test_consistent_window_recovers_peak_forces(self):
        # stage a sliding trajectory at half friction; refinement must pull
        # the peak estimates toward the true scaled peaks from the window
        # evidence alone, even though the network prior says otherwise
        from graydrive.dynamics import FrictionSchedule, simulate

        mu = 0.5
        controls = [ControlInput(steer=0.3 * np.sin(0.8 * i * 0.02), accel=0.0) for i in range(400)]
        traj = simulate(VehicleState(vx=11.0), controls, FrictionSchedule.constant(mu),
                        PARAMS, GT_COEFFS, 0.02)
        model = dpm_with_fixed_coeffs(GT_COEFFS)  # prior believes mu = 1
        rows = np.column_stack([traj.states[:-1, 3:6], traj.controls[:-1]])
        # pick a window during a hard-slip phase
        alpha = np.abs(traj.tires[:, 0])
        t = int(np.argmax(alpha[:-10]))
        hist = rows[t - 8:t]
        coeffs = model.estimate_coeffs(hist)
        assert abs(coeffs[2] - mu * GT_COEFFS.d_f) / (mu * GT_COEFFS.d_f) < 0.15
        assert abs(coeffs[6] - mu * GT_COEFFS.d_r) / (mu * GT_COEFFS.d_r) < 0.15

    def test_uninformative_window_keeps_prior(self):
        model = dpm_with_fixed_coeffs(GT_COEFFS)
        row = np.array([10.0, 0.0, 0.0, 0.0, 0.0])
        hist = np.tile(row, (8, 1))
        coeffs = model.estimate_coeffs(hist)
        np.testing.assert_allclose(coeffs, GT_COEFFS.as_array(), rtol=1e-9)

    def test_refined_forward_deterministic(self):
        rng = np.random.default_rng(30)
        model = DeepPacejkaModel.init(PARAMS, rng=rng)
        hist, state, u = random_window(rng)
        a = model.forward_refined(hist, state, u)
        b = model.forward_refined(hist, state, u)
        np.testing.assert_array_equal(a.coeffs, b.coeffs)
        np.testing.assert_array_equal(a.deriv, b.deriv)

    def test_predict_without_refinement_matches_forward(self):
        rng = np.random.default_rng(31)
        model = DeepPacejkaModel.init(PARAMS, rng=rng)
        hist, state, u = random_window(rng)
        deriv, tire, peaks = model.predict(hist, state, u, refine=False)
        out = model.forward(hist, state, u)
        np.testing.assert_array_equal(deriv, out.deriv)
        np.testing.assert_array_equal(tire, out.tire)

    def test_batched_refinement_matches_single(self):
        rng = np.random.default_rng(32)
        model = DeepPacejkaModel.init(PARAMS, rng=rng)
        hists = np.stack([random_window(rng)[0] for _ in range(5)])
        batch = model.estimate_coeffs(hists)
        for i in range(5):
            single = model.estimate_coeffs(hists[i])
            np.testing.assert_allclose(batch[i], single, rtol=1e-10)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(21)
        for ctor in (DeepPacejkaModel.init, BaselineModel.init):
            model = ctor(PARAMS, rng=rng)
            model.stats = NormalizationStats(
                rng.normal(size=5), rng.uniform(0.5, 2, 5),
                rng.normal(size=3), rng.uniform(0.5, 2, 3),
            )
            path = tmp_path / f"{model.kind}.json"
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
            hist, state, u = random_window(rng)
            if model.kind == "dpm":
                a, b = model.forward(hist, state, u), loaded.forward(hist, state, u)
                np.testing.assert_array_equal(a.deriv, b.deriv)
                np.testing.assert_array_equal(a.coeffs, b.coeffs)
            else:
                np.testing.assert_array_equal(
                    model.forward(hist, state, u), loaded.forward(hist, state, u)
                )
            for w1, w2 in zip(model.net.weights, loaded.net.weights):
                np.testing.assert_array_equal(w1, w2)

    def test_checkpoint_is_single_json_document(self, tmp_path):
        model = DeepPacejkaModel.init(PARAMS, rng=np.random.default_rng(22))
        path = tmp_path / "m.json"
        save_checkpoint(model, path)
        doc = json.loads(path.read_text())
        for key in ("kind", "layer_sizes", "weights", "biases",
                    "normalization", "coeff_bounds", "history_len", "dt"):
            assert key in doc

    def test_dict_round_trip(self):
        model = BaselineModel.init(PARAMS, rng=np.random.default_rng(23))
        clone = model_from_dict(checkpoint_dict(model))
        for w1, w2 in zip(model.net.weights, clone.net.weights):
            np.testing.assert_array_equal(w1, w2)


class TestFeatures:
    def test_shape_and_normalization(self):
        stats = NormalizationStats(np.arange(5.0), np.full(5, 2.0), np.zeros(3), np.ones(3))
        hist = np.ones((8, 5))
        feats = make_features(hist, VehicleState(vx=1.0, vy=1.0, omega=1.0),
                              ControlInput(1.0, 1.0), stats)
        assert feats.shape == (45,)
        expected_row = (np.ones(5) - np.arange(5.0)) / 2.0
        np.testing.assert_allclose(feats[:5], expected_row)
        np.testing.assert_allclose(feats[-5:], expected_row)

    def test_std_floor(self):
        stats = NormalizationStats(np.zeros(5), np.zeros(5), np.zeros(3), np.zeros(3))
        assert np.all(stats.feat_std >= 1e-6)
        assert np.all(stats.target_std >= 1e-6)
