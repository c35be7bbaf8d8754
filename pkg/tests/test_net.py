"""Core dynamics: activations, pressure, energy, relaxation, topology."""

import numpy as np
import pytest

from astdp.net import (
    ClampPlan,
    DivergenceError,
    HyperParams,
    NetworkParams,
    activation,
    activation_deriv,
    build_topology,
    clamp_cost,
    custom_topology,
    energy,
    energy_grad,
    fan_in,
    init_params,
    pressure,
    relax_step,
)


def single_neuron():
    topo = custom_topology(np.zeros((1, 1), dtype=bool), [0], [], [])
    return topo, NetworkParams(np.zeros((1, 1)), np.zeros(1))


def symmetrized(params: NetworkParams) -> NetworkParams:
    return NetworkParams(0.5 * (params.W + params.W.T), params.b.copy())


class TestActivation:
    def test_midpoint(self):
        assert activation(0.0) == 0.5

    def test_deriv_at_zero(self):
        assert activation_deriv(0.0) == 1.0

    def test_value_at_one(self):
        assert activation(1.0) == pytest.approx(1.0 / (1.0 + np.exp(-4.0)), abs=1e-12)
        assert activation(1.0) == pytest.approx(0.98201379, abs=1e-7)

    def test_elementwise_on_matrices(self):
        x = np.array([[0.0, 1.0], [-1.0, 2.0]])
        out = activation(x)
        assert out.shape == x.shape
        assert out[0, 0] == 0.5

    def test_deriv_matches_finite_difference(self):
        x = np.linspace(-3, 3, 101)
        h = 1e-6
        numeric = (activation(x + h) - activation(x - h)) / (2 * h)
        np.testing.assert_allclose(activation_deriv(x), numeric, atol=1e-7)


class TestPressure:
    def test_zero_weights_zero_bias(self):
        topo = build_topology((2, 2, 1))
        params = NetworkParams(np.zeros((5, 5)), np.zeros(5))
        s = np.random.default_rng(0).normal(size=(3, 5))
        assert np.all(pressure(params, s) == 0.0)

    def test_single_neuron_bias(self):
        _, params = single_neuron()
        params.b[0] = 1.0
        assert pressure(params, np.zeros((1, 1)))[0, 0] == 1.0

    def test_two_neuron_hand_value(self):
        w = np.zeros((2, 2))
        w[1, 0] = 0.5  # into neuron 0 from neuron 1
        params = NetworkParams(w, np.zeros(2))
        r = pressure(params, np.zeros((1, 2)))
        assert r[0, 0] == pytest.approx(1.0 * 0.5 * 0.5, abs=1e-12)
        assert r[0, 1] == 0.0

    def test_shape_mismatch_rejected(self):
        _, params = single_neuron()
        with pytest.raises(ValueError):
            pressure(params, np.zeros((1, 3)))


def energy_oracle(params: NetworkParams, s: np.ndarray) -> np.ndarray:
    """Term-by-term double loop, kept independent of the vectorized path."""
    s = np.atleast_2d(s)
    batch, n = s.shape
    out = np.zeros(batch)
    for b in range(batch):
        total = 0.0
        for i in range(n):
            total += 0.5 * s[b, i] ** 2
            total -= params.b[i] * activation(s[b, i])
            for j in range(n):
                if i != j:
                    total -= 0.5 * params.W[i, j] * activation(s[b, i]) * activation(s[b, j])
        out[b] = total
    return out


class TestEnergy:
    def test_all_zero(self):
        topo = build_topology((2, 2, 1))
        params = NetworkParams(np.zeros((5, 5)), np.zeros(5))
        assert energy(params, np.zeros((1, 5)))[0] == 0.0

    def test_bias_only(self):
        _, params = single_neuron()
        params.b[0] = 1.0
        assert energy(params, np.zeros((1, 1)))[0] == pytest.approx(-0.5, abs=1e-12)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(11)
        topo = build_topology((3, 3, 2))
        params = init_params(topo, rng)
        params.b = rng.normal(0, 0.5, 8)
        s = rng.normal(0, 1, (4, 8))
        np.testing.assert_allclose(energy(params, s), energy_oracle(params, s),
                                   atol=1e-12, rtol=0)


class TestClampCost:
    def plan(self, target, strength):
        target = np.atleast_2d(target)
        strength = np.atleast_2d(strength)
        return ClampPlan(target, strength.copy(), strength.copy())

    def test_exact_targets_cost_nothing(self):
        s = np.array([[0.3, 0.7]])
        plan = self.plan(s, np.ones((1, 2)))
        assert clamp_cost(s, plan)[0] == 0.0

    def test_single_clamped_neuron(self):
        plan = self.plan(np.array([[1.0]]), np.array([[0.4]]))
        assert clamp_cost(np.zeros((1, 1)), plan)[0] == pytest.approx(0.5)

    def test_two_neurons_hand_value(self):
        plan = self.plan(np.array([[1.0, 0.0]]), np.ones((1, 2)))
        s = np.array([[0.6, 0.2]])
        assert clamp_cost(s, plan)[0] == pytest.approx(0.1, abs=1e-12)

    def test_unclamped_neurons_ignored(self):
        plan = self.plan(np.array([[1.0, 5.0]]), np.array([[1.0, 0.0]]))
        s = np.array([[1.0, 0.0]])
        assert clamp_cost(s, plan)[0] == 0.0


class TestRelaxStep:
    def test_pure_decay(self):
        _, params = single_neuron()
        s = np.array([[1.0]])
        zero = np.zeros((1, 1))
        s2, _ = relax_step(params, s, zero, zero, 0.5, zero)
        assert s2[0, 0] == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("theta", [0.25, 0.4, 0.7])
    @pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
    def test_clamp_fixed_point(self, theta, t):
        _, params = single_neuron()
        s = np.array([[0.3]])
        v = np.zeros((1, 1))
        target = np.array([[t]])
        strength = np.array([[theta]])
        for _ in range(3000):
            s_new, v = relax_step(params, s, target, strength, 0.3, v)
            if np.abs(s_new - s).max() < 1e-12:
                s = s_new
                break
            s = s_new
        assert s[0, 0] == pytest.approx(theta * t / (1.0 + theta), abs=1e-8)

    def test_momentum_overshoots_step_change(self):
        _, params = single_neuron()
        zero = np.zeros((1, 1))
        s, v = np.array([[0.0]]), zero.copy()
        target, strength = np.array([[1.0]]), np.array([[0.4]])
        trail = []
        for _ in range(120):
            s, v = relax_step(params, s, target, strength, 0.5, v, inertia=0.5)
            trail.append(s[0, 0])
        settled = trail[-1]
        assert max(trail) > settled + 1e-3

    def test_divergence_detected(self):
        _, params = single_neuron()
        with pytest.raises(DivergenceError):
            relax_step(params, np.array([[9.0]]), np.array([[100.0]]),
                       np.array([[50.0]]), 1.0, np.zeros((1, 1)))

    def test_nonfinite_detected(self):
        _, params = single_neuron()
        with pytest.raises(DivergenceError):
            relax_step(params, np.array([[np.nan]]), np.zeros((1, 1)),
                       np.zeros((1, 1)), 0.5, np.zeros((1, 1)))


class TestInitParams:
    def test_masked_out_entries_zero(self):
        topo = build_topology((3, 4, 2))
        params = init_params(topo, 0)
        assert np.all(params.W[~topo.mask] == 0.0)

    def test_fan_in_600_bound(self):
        # Uniform bound sqrt(6/600) = 0.1; with 600 draws the extremes
        # should press against it without crossing.
        topo = build_topology((600, 600, 0))
        params = init_params(topo, 1)
        col = topo.input_idx[0]  # fan-in of an input neuron is the 600 hiddens
        weights = params.W[topo.mask[:, col], col]
        assert len(weights) == 600
        assert np.abs(weights).max() <= 0.1
        assert np.abs(weights).max() > 0.08

    def test_deterministic_given_seed(self):
        topo = build_topology((4, 5, 3))
        a = init_params(topo, 7)
        b = init_params(topo, 7)
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)

    def test_biases_start_at_zero(self):
        topo = build_topology((4, 5, 3))
        assert np.all(init_params(topo, 7).b == 0.0)

    def test_inverted_variant_widens_bound(self):
        topo = build_topology((600, 600, 0))
        wide = init_params(topo, 1, inverted_xavier=True)
        col = topo.input_idx[0]
        assert np.abs(wide.W[:, col]).max() > 1.0


class TestTopology:
    def test_single_hidden_layer_structure(self):
        topo = build_topology((3, 4, 2))
        m = topo.mask
        for i in topo.input_idx:
            for o in topo.output_idx:
                assert not m[i, o] and not m[o, i]
            for h in topo.hidden_idx:
                assert m[i, h] and m[h, i]
        hid = topo.hidden_idx
        sub = m[np.ix_(hid, hid)]
        assert np.array_equal(sub, ~np.eye(len(hid), dtype=bool))

    def test_deep_net_has_no_intra_hidden_recurrence(self):
        topo = build_topology((3, 4, 4, 2))
        slices = topo.layer_slices()
        h1, h2 = slices[1], slices[2]
        assert not topo.mask[h1, h1].any()
        assert not topo.mask[h2, h2].any()
        assert topo.mask[h1, h2].all()
        # no skip connections between input and second hidden layer
        assert not topo.mask[slices[0], h2].any()

    def test_mask_symmetric_zero_diag(self):
        topo = build_topology((5, 6, 3))
        assert np.array_equal(topo.mask, topo.mask.T)
        assert not np.diag(topo.mask).any()

    def test_index_partition(self):
        topo = build_topology((3, 4, 2))
        all_idx = np.sort(np.concatenate([topo.input_idx, topo.hidden_idx, topo.output_idx]))
        assert np.array_equal(all_idx, np.arange(topo.n_total))
        assert np.array_equal(np.sort(topo.visible_idx),
                              np.sort(np.concatenate([topo.input_idx, topo.output_idx])))

    def test_zero_output_layer_allowed(self):
        topo = build_topology((4, 8, 0))
        assert topo.n_output == 0
        assert len(topo.visible_idx) == 4

    def test_rejects_degenerate_shapes(self):
        with pytest.raises(ValueError):
            build_topology((4,))
        with pytest.raises(ValueError):
            build_topology((4, 0, 2))

    def test_fan_in_counts(self):
        topo = build_topology((3, 4, 2))
        fans = fan_in(topo)
        assert fans[topo.input_idx[0]] == 4
        assert fans[topo.hidden_idx[0]] == 3 + 3 + 2  # in + other hid + out


class TestHyperParams:
    def test_defaults_valid(self):
        HyperParams().validate()

    @pytest.mark.parametrize("bad", [
        {"theta_s": 0.5, "theta_l": 0.4},
        {"eps_s": 0.0},
        {"eps_l": 1.5},
        {"alpha": -1.0},
        {"m_avg": 1.0},
        {"free_iters": 200, "iters": 100},
        {"k": 0.0},
        {"t_c": -0.1},
        {"inertia": 0.0},
        {"batch": 0},
        {"smoothing_rate": -0.5},
    ])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ValueError):
            HyperParams(**bad).validate()


class TestGradientConsistency:
    """The unclamped drive must descend the energy when W is symmetric."""

    def test_drive_equals_negative_gradient(self):
        rng = np.random.default_rng(123)
        h = 1e-5
        for _ in range(20):
            topo = build_topology((5, 6, 5))
            params = symmetrized(init_params(topo, rng))
            params.b = rng.normal(0, 0.3, topo.n_total)
            s = rng.uniform(-1, 1, (1, topo.n_total))
            drive = pressure(params, s) - s
            for i in range(topo.n_total):
                sp, sm = s.copy(), s.copy()
                sp[0, i] += h
                sm[0, i] -= h
                fd = (energy(params, sp) - energy(params, sm))[0] / (2 * h)
                denom = max(abs(fd), abs(drive[0, i]), 1e-8)
                assert abs(-fd - drive[0, i]) / denom < 1e-5

    def test_energy_grad_diagnostic_matches_drive_when_symmetric(self):
        rng = np.random.default_rng(5)
        topo = build_topology((4, 6, 4))
        params = symmetrized(init_params(topo, rng))
        s = rng.uniform(-1, 1, (3, topo.n_total))
        np.testing.assert_allclose(energy_grad(params, s), -(pressure(params, s) - s),
                                   atol=1e-12)

    def test_energy_nonincreasing_over_relaxation(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            topo = build_topology((4, 5, 3))
            params = symmetrized(init_params(topo, rng))
            s = rng.uniform(-1, 1, (1, topo.n_total))
            v = np.zeros_like(s)
            zero = np.zeros_like(s)
            e_prev = energy(params, s)[0]
            for _ in range(200):
                s, v = relax_step(params, s, zero, zero, 0.05, v)
                e = energy(params, s)[0]
                assert e <= e_prev + 1e-9
                e_prev = e

    def test_clamped_objective_nonincreasing(self):
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            topo = build_topology((4, 5, 3))
            params = symmetrized(init_params(topo, rng))
            s = rng.uniform(-1, 1, (1, topo.n_total))
            v = np.zeros_like(s)
            target = np.zeros((1, topo.n_total))
            target[0, topo.visible_idx] = rng.uniform(0, 1, len(topo.visible_idx))
            strength = np.zeros((1, topo.n_total))
            strength[0, topo.visible_idx] = 0.4
            plan = ClampPlan(target, strength, strength)

            def objective(state):
                gap = np.where(strength > 0, target - state, 0.0)
                return energy(params, state)[0] + 0.5 * (strength * gap * gap).sum()

            f_prev = objective(s)
            for _ in range(200):
                s, v = relax_step(params, s, target, strength, 0.05, v)
                f = objective(s)
                assert f <= f_prev + 1e-9
                f_prev = f


class TestMaskPreservation:
    def test_masked_entries_stay_zero_through_updates(self):
        from astdp.plasticity import smoothing_update, stdp_update

        rng = np.random.default_rng(3)
        topo = build_topology((3, 4, 2))
        params = init_params(topo, rng)
        s = rng.uniform(0, 1, (2, topo.n_total))
        dz = rng.normal(0, 0.1, (2, topo.n_total))
        for _ in range(5):
            params = stdp_update(params, topo, s, dz, 0.01)
            ds = pressure(params, s) - s
            params = smoothing_update(params, topo, s, ds, 0.001)
        assert np.all(params.W[~topo.mask] == 0.0)
