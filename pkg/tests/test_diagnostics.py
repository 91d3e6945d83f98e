"""
Tests for Gram spectra, PL constants and the initialization condition.
"""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.data import Dataset
from core.diagnostics import (gram_matrix, init_condition, lambda_bounds, pl_constants, read_report,
                              sweep_init_condition, trajectory_lambda_min, verify_pl_along_run,
                              write_report)
from core.embedding import build_embedding
from core.errors import DegenerateDataError, FormatError, InvalidInputError
from core.experiments import separated_points
from core.flow import gradient, zero_control
from core.kernels import KernelSpec, beta, kappa
from core.rff import sample_features
from core.trainer import gd_train, make_train_config
from core.utils import make_rng


def far_apart(N=3, gap=10.0):
    x = np.zeros((N, 2))
    x[:, 0] = gap * np.arange(N)
    return Dataset(inputs=x, targets=-x)


class TestGram:

    def test_exact_gram(self, matern3):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        g = gram_matrix(pts, matern3)
        assert_allclose(np.diag(g), 1.0)
        assert_allclose(g, g.T)
        assert g[0, 1] > g[0, 2] > 0

    def test_feature_gram_approximates_exact(self, gaussian_spec):
        pts = np.random.default_rng(0).standard_normal((4, 2))
        exact = gram_matrix(pts, gaussian_spec)
        approx = gram_matrix(pts, sample_features(2, 50_000, gaussian_spec, seed=0))
        assert_allclose(approx, exact, atol=2e-2)

    def test_lambda_bounds(self):
        assert lambda_bounds(np.eye(3)) == pytest.approx((1.0, 1.0))
        lo, hi = lambda_bounds([[1.0, 0.5], [0.5, 1.0]])
        assert lo == pytest.approx(0.5) and hi == pytest.approx(1.5)

    def test_lambda_bounds_are_characteristic_roots(self, matern3):
        g = gram_matrix(np.array([[0.0, 0.0], [0.8, 0.1], [0.2, 1.1]]), matern3)
        tr = np.trace(g)
        minors = 0.5 * (tr ** 2 - np.trace(g @ g))
        roots = np.sort(np.roots([1.0, -tr, minors, -np.linalg.det(g)]).real)
        lo, hi = lambda_bounds(g)
        assert lo == pytest.approx(roots[0], abs=1e-10)
        assert hi == pytest.approx(roots[-1], abs=1e-10)

    def test_rejects_asymmetric_and_non_square(self):
        with pytest.raises(InvalidInputError):
            lambda_bounds([[1.0, 0.2], [0.0, 1.0]])
        with pytest.raises(InvalidInputError):
            lambda_bounds(np.ones((2, 3)))


class TestDiagonalDominance:

    @pytest.mark.parametrize("nu,n_sets", [(math.inf, 100), (3.0, 10)])
    def test_separated_sets(self, nu, n_sets):
        spec = KernelSpec(nu)
        rng = make_rng(0, 1)
        for N in (5, 10, 20):
            b = beta(spec, N)
            for _ in range(n_sets):
                pts = separated_points(rng, N, 2, b)
                d = np.linalg.norm(pts[:, None] - pts[None], axis=2) + np.eye(N) * 1e9
                assert d.min() >= b
                assert lambda_bounds(gram_matrix(pts, spec))[0] >= 0.5


class TestPLConstants:

    def test_single_point(self, gaussian_spec):
        data = Dataset(inputs=[[1.0, 2.0]], targets=[[0.0, 0.0]])
        pl = pl_constants(data, build_embedding(2, 2, 2), gaussian_spec, 4.0, 1.0, 1)
        assert pl.lambda_used == 1.0 and pl.certified

    def test_duplicates_are_degenerate(self, gaussian_spec):
        data = Dataset(inputs=[[1.0, 2.0], [1.0, 2.0]], targets=[[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(DegenerateDataError):
            pl_constants(data, build_embedding(2, 2, 2), gaussian_spec, 4.0, 1.0, 2)

    def test_certified_when_separated(self, gaussian_spec):
        pair = build_embedding(2, 2, 2)
        pl = pl_constants(far_apart(), pair, gaussian_spec, kappa(gaussian_spec), 0.1, 3)
        assert pl.certified and pl.lambda_used == 0.5
        assert pl.Lambda_used == 3.0
        k = kappa(gaussian_spec)
        assert pl.m_R == pytest.approx(pair.sigma_min_B ** 2 * 0.5 * math.exp(-0.2 * k) / 3)
        assert pl.M_R == pytest.approx(pair.sigma_max_B ** 2 * math.exp(0.2 * k))

    def test_empirical_fallback(self, gaussian_spec, sweep_data):
        pl = pl_constants(sweep_data, build_embedding(30, 2, 2, "block"), gaussian_spec, 4.0, 1.0, 10,
                          empirical_lambda=0.3)
        assert not pl.certified and pl.lambda_used == 0.3


class TestInitCondition:

    def test_zero_loss_is_satisfied(self, gaussian_spec, sweep_data):
        rep = init_condition(sweep_data, build_embedding(30, 2, 2, "block"), gaussian_spec, 4.0, 1.0, 0.0, 0.0, 10)
        assert rep.init_lhs == 0.0 and rep.init_satisfied

    def test_formula(self, gaussian_spec):
        pair = build_embedding(2, 2, 2)
        k = kappa(gaussian_spec)
        rep = init_condition(far_apart(), pair, gaussian_spec, k, 0.1, 0.05, 1e-6, 3)
        want = (math.sqrt(8) * pair.sigma_max_B * math.sqrt(3 * 3 * 1e-6) * math.exp(3 * k * 0.15)
                / (pair.sigma_min_B ** 2 * 0.5))
        assert rep.init_lhs == pytest.approx(want)
        assert rep.mu == rep.m_R
        assert rep.init_satisfied == (want <= 0.1)

    def test_invalid_radius(self, gaussian_spec):
        with pytest.raises(InvalidInputError):
            init_condition(far_apart(), build_embedding(2, 2, 2), gaussian_spec, 4.0, 0.0, 0.0, 1.0, 3)

    def test_sweep_finds_smallest_q(self, gaussian_spec):
        data = far_apart(2, 6.0)
        k = kappa(gaussian_spec)
        found, reports = sweep_init_condition(data, gaussian_spec, lambda q: k, lambda q, pair: 1e-7,
                                              0.1, [8, 2, 4], "canonical")
        assert len(reports) == 3
        assert found == 2
        assert reports[0].init_satisfied

    def test_report_file(self, tmp_path, gaussian_spec, sweep_data):
        rep = init_condition(sweep_data, build_embedding(30, 2, 2, "block"), gaussian_spec, 4.0, 1.0, 0.0,
                             0.3, 10, empirical_lambda=0.2)
        back = read_report(write_report(rep, tmp_path / "pl_report.txt"))
        assert back == rep

    def test_malformed_report(self, tmp_path):
        p = tmp_path / "pl_report.txt"
        p.write_text("R: 1\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_report(p)


class TestPLAlongRun:

    def test_sandwich_holds_on_block_run(self, sweep_data):
        config = make_train_config(q=8, q_int=16, L=32, nu=2.5, embedding="block", max_steps=40)
        log = gd_train(config, sweep_data)
        checks = verify_pl_along_run(log, log.pl_report, slack_L=config.L)
        assert len(checks) == len(log.records)
        assert all(c.upper_ok for c in checks)
        assert all(c.lower_ok for c in checks)

    def test_missing_lambda_is_unchecked(self, sweep_data):
        config = make_train_config(q=8, q_int=16, L=32, nu=2.5, embedding="block", max_steps=3,
                                   track_lambda=False)
        log = gd_train(config, sweep_data)
        log.records[-1].lambda_min_traj = 0.5
        checks = verify_pl_along_run(log, log.pl_report, slack_L=config.L)
        assert [c.lower_ok for c in checks[:-1]] == [None] * (len(checks) - 1)
        assert all(math.isnan(c.lower_bound) for c in checks[:-1])
        assert checks[-1].lower_ok is not None
        assert all(c.upper_ok for c in checks)

    @pytest.mark.slow
    @pytest.mark.parametrize("q", [2, 8, 32])
    def test_sandwich_holds_across_widths(self, q, sweep_data):
        config = make_train_config(q=q, q_int=2 * q, max_steps=500)
        log = gd_train(config, sweep_data)
        checks = verify_pl_along_run(log, log.pl_report, slack_L=config.L)
        assert all(c.upper_ok for c in checks)
        assert all(c.lower_ok for c in checks)

    def test_zero_loss_point(self, small_problem, gaussian_spec):
        data, bank, pair, _ = small_problem
        exact = Dataset(inputs=data.inputs, targets=data.inputs @ pair.BA.T)
        control = zero_control(5, 3, 16)
        res = gradient(control, bank, pair, exact)
        lam = trajectory_lambda_min(res.bundle, bank, steps=range(5))
        rep = init_condition(exact, pair, KernelSpec(3.0), 5.0, 1.0, 0.0, res.loss, 4, empirical_lambda=lam)
        assert rep.init_satisfied

    def test_inflated_gradient_fails_upper_bound(self, sweep_data):
        config = make_train_config(q=8, q_int=16, L=32, nu=2.5, embedding="block", max_steps=3)
        log = gd_train(config, sweep_data)
        # v0 = 0, so the upper bound at step 0 is 2 sigma_max(B)^2 L exactly
        log.records[0].grad_sq_norm *= 1e6
        checks = verify_pl_along_run(log, log.pl_report)
        assert [c.upper_ok for c in checks] == [False, True, True, True]


class TestProperties:

    def test_block_gram_spectrum(self, matern3):
        pts = np.array([[0.0, 0.0], [0.7, 0.4]])
        g = gram_matrix(pts, matern3)
        block = np.kron(g, np.eye(2))
        scalar = np.repeat(np.linalg.eigvalsh(g), 2)
        assert_allclose(np.sort(np.linalg.eigvalsh(block)), np.sort(scalar), atol=1e-10)

    def test_init_lhs_monotone(self, gaussian_spec):
        pair = build_embedding(2, 2, 2)
        k = kappa(gaussian_spec)
        by_loss = [init_condition(far_apart(), pair, gaussian_spec, k, 0.1, 0.0, l0, 3).init_lhs
                   for l0 in (1e-8, 1e-6, 1e-4)]
        by_R = [init_condition(far_apart(), pair, gaussian_spec, k, R, 0.0, 1e-6, 3).init_lhs
                for R in (0.05, 0.1, 0.2)]
        by_N = [init_condition(far_apart(N), pair, gaussian_spec, k, 0.1, 0.0, 1e-6, N).init_lhs
                for N in (2, 3, 4)]
        for seq in (by_loss, by_R, by_N):
            assert seq == sorted(seq)
