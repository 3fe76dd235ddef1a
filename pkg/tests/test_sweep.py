"""Sweep fitting: WLS recovery, bootstrap, scaling, references."""

import math

import numpy as np
import pytest
from numpy.random import PCG64, Generator

from qpert.errors import StabilityError
from qpert.params import QueueParams
from qpert.perturbation import PerturbationSpec
from qpert.sweep import _wls_fit, rsr_reference, run_sweep

from conftest import assert_within_se


class TestWlsCore:
    def test_recovers_known_coefficients(self):
        # synthetic model with known noise: the fit is the oracle check
        gen = Generator(PCG64(1))
        eps = np.asarray([0.01, 0.02, 0.04, 0.06, 0.08, 0.1])
        se = np.full(len(eps), 1e-4)
        reps = 4000
        betas = np.empty((reps, 2))
        for i in range(reps):
            y = 2.0 * eps + 3.0 * eps**2 + gen.normal(0, se)
            betas[i], cov = _wls_fit(eps, y, se)
        assert betas[:, 0].mean() == pytest.approx(2.0, abs=4 * betas[:, 0].std() / math.sqrt(reps))
        assert betas[:, 1].mean() == pytest.approx(3.0, abs=4 * betas[:, 1].std() / math.sqrt(reps))
        # the analytic covariance matches the sampling spread
        assert betas[:, 0].std(ddof=1) == pytest.approx(math.sqrt(cov[0, 0]), rel=0.1)
        assert betas[:, 1].std(ddof=1) == pytest.approx(math.sqrt(cov[1, 1]), rel=0.1)

    def test_zero_variance_zero_gap(self):
        beta, cov = _wls_fit(np.asarray([0.1, 0.2]), np.zeros(2), np.zeros(2))
        assert np.all(beta == 0) and np.all(cov == 0)


class TestRunSweep:
    def test_zero_perturbation_exact_zero_fit(self, env_two_state):
        spec = PerturbationSpec(env_two_state, [0.0, 0.0])
        res = run_sweep(
            QueueParams(1.0, 2.0), env_two_state, spec,
            [0.02, 0.05], 10_000, seed=5,
        )
        assert np.all(res.gap_means == 0)
        assert res.d1_hat == 0 and res.d2_hat == 0
        assert res.d1_se == 0 and res.d2_se == 0

    def test_constant_perturbation_gate(self, env_const):
        # d1 = 1 and d2 = -1 from the exact geometric expansion
        spec = PerturbationSpec(env_const, [1.0])
        res = run_sweep(
            QueueParams(1.0, 2.0), env_const, spec,
            [0.01, 0.02, 0.04, 0.06, 0.08, 0.10], 60_000, seed=6,
        )
        assert_within_se(res.d1_hat, 1.0, res.d1_se, 3.0, "constant d1")
        assert_within_se(res.d2_hat, -1.0, res.d2_se, 3.0, "constant d2")
        assert res.n_aborted == 0

    def test_two_state_first_order(self, env_two_state, spec_up):
        res = run_sweep(
            QueueParams(1.0, 2.0), env_two_state, spec_up,
            [0.02, 0.04, 0.06, 0.08, 0.10], 40_000, seed=7,
        )
        assert_within_se(res.d1_hat, 0.5, res.d1_se, 3.0, "two-state d1")

    def test_bootstrap_confirms_analytic_errors(self, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        res = run_sweep(
            QueueParams(1.0, 2.0), env_const, spec,
            [0.02, 0.05, 0.1], 20_000, seed=8, bootstrap_resamples=200,
        )
        assert res.bootstrap_d1_se == pytest.approx(res.d1_se, rel=0.30)
        assert res.bootstrap_d2_se == pytest.approx(res.d2_se, rel=0.30)

    def test_error_scaling_with_replicas(self, env_const):
        # doubling the budget shrinks the d2 error by about 1/sqrt(2)
        spec = PerturbationSpec(env_const, [1.0])
        grid = [0.02, 0.05, 0.1]
        r1 = run_sweep(QueueParams(1.0, 2.0), env_const, spec, grid, 20_000, seed=9)
        r2 = run_sweep(QueueParams(1.0, 2.0), env_const, spec, grid, 40_000, seed=10)
        ratio = r2.d2_se / r1.d2_se
        assert ratio == pytest.approx(1.0 / math.sqrt(2.0), rel=0.20)

    def test_residuals_stay_cubic_scale(self, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        res = run_sweep(
            QueueParams(1.0, 2.0), env_const, spec,
            [0.01, 0.02, 0.04, 0.06, 0.08, 0.10], 40_000, seed=11,
        )
        # residuals after the quadratic fit are noise plus O(eps^3); for
        # the constant case the cubic coefficient is exactly 1, so the
        # normalised residual scale stays modest
        assert np.isfinite(res.max_resid_over_eps3)
        norm = np.abs(res.residuals) - 3.0 * res.gap_stderrs
        assert np.all(norm / res.eps_grid**3 < 3.0)

    def test_determinism_and_worker_invariance(self, env_two_state, spec_up):
        kw = dict(eps_grid=[0.05, 0.1], n_replicas_per_point=12_000, seed=12)
        a = run_sweep(QueueParams(1.0, 2.0), env_two_state, spec_up, **kw)
        b = run_sweep(QueueParams(1.0, 2.0), env_two_state, spec_up, **kw)
        c = run_sweep(QueueParams(1.0, 2.0), env_two_state, spec_up, n_workers=3, **kw)
        assert np.array_equal(a.gap_means, b.gap_means)
        assert a.d2_hat == b.d2_hat == c.d2_hat
        assert np.array_equal(a.gap_means, c.gap_means)

    def test_grid_validation(self, env_two_state, spec_up):
        p = QueueParams(1.0, 2.0)
        with pytest.raises(ValueError):
            run_sweep(p, env_two_state, spec_up, [0.05], 10_000, seed=1)
        with pytest.raises(ValueError):
            run_sweep(p, env_two_state, spec_up, [0.1, 0.05], 10_000, seed=1)
        with pytest.raises(ValueError):
            run_sweep(p, env_two_state, spec_up, [0.05, 0.1], 500, seed=1)
        with pytest.raises(ValueError):
            run_sweep(p, env_two_state, spec_up, [-0.1, 0.1], 10_000, seed=1)

    def test_table_rows(self, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        res = run_sweep(QueueParams(1.0, 2.0), env_const, spec, [0.05, 0.1], 10_000, seed=13)
        rows = res.table_rows()
        assert [r["eps"] for r in rows] == [0.05, 0.1]
        assert all({"eps", "gap_mean", "gap_stderr", "fitted"} == set(r) for r in rows)


class TestRsrReference:
    def test_zero_eps(self, spec_up):
        assert rsr_reference(QueueParams(1.0, 2.0), spec_up, 0.0) == 1.0

    def test_half_mean(self, spec_up):
        # E[p] = 1/2 at eps = 0.1: mean busy period 1/1.05
        assert rsr_reference(QueueParams(1.0, 2.0), spec_up, 0.1) == pytest.approx(1.0 / 1.05)

    def test_instability_rejected(self, env_two_state):
        spec = PerturbationSpec(env_two_state, [-4.0, -4.0])
        with pytest.raises(StabilityError):
            rsr_reference(QueueParams(1.0, 2.0, 0.3), spec, 0.3)

    def test_cubic_remainder(self, env_const):
        # 1/(mu + eps c - lam) minus its quadratic truncation is O(eps^3)
        spec = PerturbationSpec(env_const, [1.0])
        p = QueueParams(1.0, 2.0)
        for eps in (0.01, 0.02, 0.05, 0.1):
            exact = rsr_reference(p, spec, eps)
            trunc = 1.0 - eps + eps**2
            remainder = abs(exact - trunc) / eps**3
            assert remainder <= 1.0 + 1e-9  # |sum_k>=3 (-eps)^k| / eps^3 <= 1/(1-eps)
            assert remainder >= 0.9
