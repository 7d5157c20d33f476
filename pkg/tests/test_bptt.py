import dataclasses

import numpy as np
import pytest

from hybridckf import mlp
from hybridckf.bptt import (
    AdamState,
    BpttConfig,
    adam_step,
    bptt_gradient,
    bptt_train,
    loss_and_gradient,
    open_loop_nrmse,
    rollout_start,
    unroll_loss,
)
from hybridckf.errors import Diverged
from hybridckf.retina import RetinaParams, inject_noise, make_train_test
from hybridckf.state_space import HybridModelConfig, hybrid_dataset, linearized_oracle_params, rollout


@pytest.fixture(scope="module")
def short_noisy():
    train, _ = make_train_test(RetinaParams(), 0.01, 0.5, 0.1, 30.0, 3, 4)
    return train


@pytest.fixture(scope="module")
def default_split():
    return make_train_test(RetinaParams(), 0.01, 12.0, 8.0, 49.53, 11, 12)


def central_difference(fn, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


class TestLoss:
    def test_self_consistent(self):
        model = HybridModelConfig()
        omega = mlp.flatten(mlp.init_like(5, model.nn_template)) * 0.3
        params = mlp.unflatten(omega, model.nn_template)
        clean = hybrid_dataset(params, model, 400)
        noisy = dataclasses.replace(
            clean, y_noisy=clean.y_clean.copy(), pin_noisy=clean.pin, pout_noisy=clean.pout, snr_db=np.inf
        )
        s0 = clean.p_true[0]
        loss, traj = unroll_loss(omega, noisy, BpttConfig(model=model), s0=s0)
        assert loss < 1e-20
        np.testing.assert_allclose(traj, rollout(params, s0, clean.inputs, model), atol=1e-12)

    def test_zero_network_finite(self, short_noisy):
        loss, _ = unroll_loss(np.zeros(101), short_noisy, BpttConfig())
        assert np.isfinite(loss) and loss > 0

    def test_ignores_p4_truth(self, short_noisy):
        omega = mlp.flatten(mlp.init_like(1, HybridModelConfig().nn_template))
        p_true = short_noisy.p_true.copy()
        p_true[:, 2] += 100.0
        altered = dataclasses.replace(short_noisy, p_true=p_true)
        cfg = BpttConfig()
        assert unroll_loss(omega, short_noisy, cfg)[0] == unroll_loss(omega, altered, cfg)[0]

    def test_divergent_rollout_is_inf(self, short_noisy):
        cfg = BpttConfig(model=HybridModelConfig(dt=50.0))
        loss, traj = unroll_loss(np.zeros(101), short_noisy, cfg)
        assert loss == np.inf and traj is None
        assert np.all(np.isnan(bptt_gradient(np.zeros(101), short_noisy, cfg)))

    def test_start_uses_first_measurement(self, short_noisy):
        s0 = rollout_start(short_noisy, BpttConfig(init_p4=30.0))
        np.testing.assert_array_equal(s0[[0, 1, 3]], short_noisy.y_noisy[0])
        assert s0[2] == 30.0


class TestGradient:
    def test_matches_finite_differences(self):
        train, _ = make_train_test(RetinaParams(), 0.01, 0.5, 0.1, 30.0, 21, 22)
        ds = train.window(0, 50)
        cfg = BpttConfig()
        template = cfg.model.nn_template
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(20):
            omega = mlp.flatten(mlp.init_like(int(rng.integers(2**31)), template))
            grad = bptt_gradient(omega, ds, cfg)
            fd = central_difference(lambda w: unroll_loss(w, ds, cfg)[0], omega)
            worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
        assert worst < 1e-4

    def test_initial_state_gradient(self, short_noisy):
        ds = short_noisy.window(0, 30)
        cfg = BpttConfig()
        omega = mlp.flatten(mlp.init_like(3, cfg.model.nn_template))
        s0 = rollout_start(ds, cfg)
        _, _, d_s0, _ = loss_and_gradient(omega, ds, cfg, s0=s0)
        fd = central_difference(lambda s: unroll_loss(omega, ds, cfg, s0=s)[0], s0)
        np.testing.assert_allclose(d_s0, fd, rtol=1e-5)

    def test_zero_window(self, short_noisy):
        cfg = BpttConfig(truncation_window=0)
        omega = mlp.flatten(mlp.init_like(3, cfg.model.nn_template))
        np.testing.assert_array_equal(bptt_gradient(omega, short_noisy, cfg), np.zeros(101))

    def test_long_window_equals_full(self, short_noisy):
        omega = mlp.flatten(mlp.init_like(3, HybridModelConfig().nn_template))
        full = bptt_gradient(omega, short_noisy, BpttConfig())
        long = bptt_gradient(omega, short_noisy, BpttConfig(truncation_window=short_noisy.n_t))
        np.testing.assert_array_equal(full, long)

    def test_truncation_changes_gradient(self, short_noisy):
        omega = mlp.flatten(mlp.init_like(3, HybridModelConfig().nn_template))
        full = bptt_gradient(omega, short_noisy, BpttConfig())
        short = bptt_gradient(omega, short_noisy, BpttConfig(truncation_window=5))
        assert not np.allclose(full, short)
        assert np.all(np.isfinite(short))

    def test_duplicated_dataset_doubles(self, short_noisy):
        # summing the loss over two identical copies doubles it and its gradient
        cfg = BpttConfig()
        omega = mlp.flatten(mlp.init_like(8, cfg.model.nn_template))
        copy = dataclasses.replace(short_noisy, y_noisy=short_noisy.y_noisy.copy())
        single = bptt_gradient(omega, short_noisy, cfg)
        doubled = single + bptt_gradient(omega, copy, cfg)
        np.testing.assert_allclose(doubled, 2 * single, rtol=1e-14)


class TestAdam:
    def test_first_step(self):
        state, omega = adam_step(AdamState.zeros(5, lr=1e-2), np.zeros(5), np.ones(5))
        np.testing.assert_allclose(omega, -1e-2, rtol=1e-6)
        assert state.step_count == 1

    def test_zero_gradient_is_fixed_point(self):
        state = AdamState.zeros(4)
        omega = np.arange(4.0)
        for _ in range(20):
            state, new = adam_step(state, omega, np.zeros(4))
            np.testing.assert_array_equal(new, omega)

    def test_step_bounded(self, rng):
        state = AdamState.zeros(10, lr=5e-3)
        omega = np.zeros(10)
        for _ in range(200):
            state, new = adam_step(state, omega, rng.standard_normal(10) * rng.uniform(1e-3, 1e3))
            # |m_hat|/sqrt(v_hat) is bounded by (1-b1)/sqrt(1-b2) in general; ~1 for steady signs
            assert np.all(np.abs(new - omega) <= 5e-3 * (0.1 / np.sqrt(0.001)) * 1.0001)
            omega = new

    def test_steady_sign_bounded_by_lr(self):
        state = AdamState.zeros(3, lr=5e-3)
        omega = np.zeros(3)
        for t in range(100):
            state, new = adam_step(state, omega, np.array([1.0, -2.0, 0.5]) * (1 + 0.1 * np.sin(t)))
            assert np.all(np.abs(new - omega) <= 5e-3 * 1.01)
            omega = new

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState.zeros(3), np.zeros(3), np.zeros(2))


class TestTraining:
    def test_monotone_on_self_consistent_data(self):
        model = HybridModelConfig()
        truth = linearized_oracle_params(model)
        ds = hybrid_dataset(truth, model, 300)
        cfg = BpttConfig(epochs=10, lr=5e-4, model=model, seed=4)
        res = bptt_train(ds, cfg)
        assert np.all(np.diff(res.losses) < 0)

    def test_deterministic_and_non_mutating(self, short_noisy):
        before = short_noisy.y_noisy.copy()
        cfg = BpttConfig(epochs=5, seed=3)
        a = bptt_train(short_noisy, cfg)
        b = bptt_train(short_noisy, cfg)
        np.testing.assert_array_equal(a.learning_curve, b.learning_curve)
        np.testing.assert_array_equal(short_noisy.y_noisy, before)

    def test_improves_on_default_data(self, default_split):
        train, test = default_split
        res = bptt_train(train, BpttConfig(seed=0), test_ds=test)
        curve = res.learning_curve
        assert curve.shape == (300, 3)
        assert curve[-1, 1] <= curve[0, 1]
        assert np.all(np.isfinite(curve[:, 2]))

    def test_initial_state_training_moves_start(self, short_noisy):
        cfg = BpttConfig(epochs=5, train_initial_state=True)
        res = bptt_train(short_noisy, cfg)
        assert not np.array_equal(res.initial_state, rollout_start(short_noisy, cfg))

    def test_divergence_raises(self, short_noisy):
        with pytest.raises(Diverged):
            bptt_train(short_noisy, BpttConfig(epochs=20, model=HybridModelConfig(dt=50.0)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            BpttConfig(epochs=0)
        with pytest.raises(ValueError):
            BpttConfig(truncation_window=-1)


class TestOpenLoop:
    def test_measurements_never_fed_back(self, default_split):
        _, test = default_split
        params = mlp.init_like(2, HybridModelConfig().nn_template)
        cfg = BpttConfig()
        shifted = dataclasses.replace(test, y_noisy=test.y_noisy.copy())
        shifted.y_noisy[1:] += 50.0
        a, traj_a = open_loop_nrmse(params, test, cfg)
        b, traj_b = open_loop_nrmse(params, shifted, cfg)
        assert a == b
        np.testing.assert_array_equal(traj_a, traj_b)

    def test_perfect_network_rolls_out_truth(self):
        model = HybridModelConfig()
        truth = linearized_oracle_params(model)
        ds = hybrid_dataset(truth, model, 200)
        clean = inject_noise(ds, np.inf, seed=0)
        err, _ = open_loop_nrmse(truth, clean, BpttConfig(model=model))
        assert err < 1e-6
