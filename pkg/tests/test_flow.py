"""
Tests for the discretized flow, its adjoint gradient and control paths.
"""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.data import Dataset, synth_dataset
from core.diagnostics import trajectory_bounds
from core.embedding import build_embedding
from core.errors import FlowDivergenceError, FormatError, ShapeError
from core.experiments import gradient_fd_error
from core.flow import (ControlPath, control_distance, control_norm, empirical_risk, forward, gradient,
                       l2_gradient, load_control, model_output, save_control, zero_control)
from core.kernels import KernelSpec
from core.rff import empirical_kappa_hat, feature_map, sample_features
from core.trainer import gd_train, make_train_config


class TestForward:

    def test_zero_control_is_identity_flow(self, small_problem):
        data, bank, pair, _ = small_problem
        control = zero_control(5, 3, 16)
        states = forward(control, bank, pair.A, data.inputs[0])
        assert states.shape == (6, 3)
        assert_allclose(states, np.tile(pair.A @ data.inputs[0], (6, 1)))
        assert_allclose(model_output(control, bank, pair, data.inputs[1]), pair.BA @ data.inputs[1])

    def test_single_euler_step(self, small_problem):
        data, bank, pair, weights = small_problem
        control = ControlPath(weights[:1])
        z0 = pair.A @ data.inputs[0]
        states = forward(control, bank, pair.A, data.inputs[0])
        assert_allclose(states[1], z0 + weights[0] @ feature_map(bank, z0))

    def test_euler_is_first_order(self, small_problem):
        data, bank, pair, weights = small_problem
        w = weights[0]

        def final_state(L):
            return forward(ControlPath(np.repeat(w[None], L, axis=0)), bank, pair.A, data.inputs[0])[-1]

        ref = final_state(2048)
        errs = [np.linalg.norm(final_state(L) - ref) for L in (64, 128, 256)]
        assert errs[0] > errs[1] > errs[2]
        for coarse, fine in zip(errs, errs[1:]):
            assert 1.6 <= coarse / fine <= 2.4

    def test_displacement_bounded_by_control_norm(self, small_problem):
        data, bank, pair, weights = small_problem
        control = ControlPath(weights)
        bound = empirical_kappa_hat(bank) * control_norm(control)
        for x in data.inputs:
            states = forward(control, bank, pair.A, x)
            assert np.linalg.norm(states[-1] - pair.A @ x) <= bound

    def test_divergence_guard(self, small_problem):
        data, bank, pair, _ = small_problem
        control = ControlPath(np.full((1, 3, 16), 1e12))
        with pytest.raises(FlowDivergenceError) as err:
            empirical_risk(control, bank, pair, data)
        assert err.value.step == 1
        assert err.value.norm > 1e8

    def test_bank_mismatch(self, small_problem):
        data, bank, pair, _ = small_problem
        with pytest.raises(ShapeError):
            empirical_risk(zero_control(5, 3, 8), bank, pair, data)


class TestGradient:

    def test_loss_matches_risk(self, small_problem):
        data, bank, pair, weights = small_problem
        control = ControlPath(weights)
        res = gradient(control, bank, pair, data)
        assert res.loss == pytest.approx(empirical_risk(control, bank, pair, data), rel=1e-14)
        assert res.grad.shape == weights.shape
        assert res.bundle.states.shape == (4, 6, 3)
        assert res.bundle.adjoints.shape == (4, 6, 3)

    def test_matches_central_differences(self, small_problem):
        data, bank, pair, weights = small_problem
        assert gradient_fd_error(ControlPath(weights), bank, pair, data) <= 1e-5

    def test_random_instances(self):
        spec = KernelSpec(3.0)
        pair = build_embedding(3, 2, 2, "block")
        worst = 0.0
        for s in range(20):
            rng = np.random.default_rng(100 + s)
            data = Dataset(inputs=rng.standard_normal((4, 2)), targets=rng.standard_normal((4, 2)))
            bank = sample_features(3, 8, spec, seed=s)
            control = ControlPath(0.3 * rng.standard_normal((5, 3, 16)))
            worst = max(worst, gradient_fd_error(control, bank, pair, data))
        assert worst <= 1e-5

    def test_zero_residual_gives_zero_gradient(self, small_problem):
        data, bank, pair, _ = small_problem
        control = zero_control(5, 3, 16)
        exact = Dataset(inputs=data.inputs, targets=data.inputs @ pair.BA.T)
        res = gradient(control, bank, pair, exact)
        assert res.loss == 0.0
        assert_array_equal(res.grad, 0.0)

    def test_l2_gradient_scaling(self):
        g = np.ones((4, 2, 2))
        assert_array_equal(l2_gradient(g, 4), 4 * g)


class TestControlPath:

    def test_norm_and_distance(self):
        c = ControlPath(np.ones((4, 2, 3)))
        assert control_norm(c) == pytest.approx(math.sqrt(6))
        assert control_distance(c, zero_control(4, 2, 3)) == pytest.approx(math.sqrt(6))
        assert c.dt == 0.25 and c.L == 4

    def test_norm_invariant_under_step_refinement(self, small_problem):
        _, _, _, weights = small_problem
        coarse = ControlPath(weights)
        fine = ControlPath(np.repeat(weights, 2, axis=0))
        assert fine.L == 2 * coarse.L
        assert control_norm(fine) == pytest.approx(control_norm(coarse), rel=1e-14)

    def test_distance_shape_mismatch(self):
        with pytest.raises(ShapeError):
            control_distance(zero_control(4, 2, 3), zero_control(3, 2, 3))

    def test_invalid_shape(self):
        with pytest.raises(ShapeError):
            ControlPath(np.zeros((2, 3)))

    def test_save_load(self, tmp_path, small_problem):
        _, bank, _, weights = small_problem
        p = save_control(ControlPath(weights), tmp_path / "checkpoint.json")
        back = load_control(p, bank=bank)
        assert_array_equal(back.weights, weights)

    def test_load_rejects_other_bank(self, tmp_path, small_problem, matern3):
        _, _, _, weights = small_problem
        p = save_control(ControlPath(weights), tmp_path / "checkpoint.json")
        with pytest.raises(FormatError):
            load_control(p, bank=sample_features(3, 4, matern3, seed=0))


class TestTrajectoryBounds:

    L = 64

    def _scaled(self, weights, kappa_hat, target):
        c = ControlPath(weights)
        n = control_norm(c)
        return ControlPath(weights * (target / (kappa_hat * n))) if n > 0 else c

    def test_untrained_controls(self):
        spec = KernelSpec(2.5)
        pair = build_embedding(4, 2, 2, "canonical")
        for s in range(15):
            rng = np.random.default_rng(200 + s)
            data = synth_dataset(6, 2, 2, 0.2, seed=s)
            bank = sample_features(4, 12, spec, seed=s)
            k_hat = empirical_kappa_hat(bank)
            control = self._scaled(rng.standard_normal((self.L, 4, 24)), k_hat, rng.uniform(0.2, 2.0))
            res = gradient(control, bank, pair, data)
            report = trajectory_bounds(res.bundle, data, pair, control, k_hat)
            assert report.ok, report

    def test_trained_controls(self):
        for s in range(5):
            config = make_train_config(q=4, q_int=12, L=self.L, nu=2.5, embedding="canonical",
                                       max_steps=15, seed=s, init_scale=1.0, track_lambda=False)
            data = synth_dataset(6, 2, 2, 0.2, seed=s)
            log = gd_train(config, data)
            control = log.control
            if log.kappa_hat * control_norm(control) > 2.0:
                control = self._scaled(control.weights, log.kappa_hat, 2.0)
            res = gradient(control, log.bank, log.pair, data)
            report = trajectory_bounds(res.bundle, data, log.pair, control, log.kappa_hat)
            assert report.ok, report
