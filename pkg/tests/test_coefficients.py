"""Expansion coefficients against closed-form, geometric and mirror oracles.

The binding self-consistency gate: a constant perturbation ``p = c`` turns
the perturbed queue into a plain M/M/1 with rate ``mu + eps*c``, whose
mean busy period expands exactly as the geometric series

    1/(mu + eps*c - lam) = sum_k (-c)^k eps^k / (mu - lam)^(k+1),

so the gap series must have d1 = c/(mu-lam)^2 and d2 = -c^2/(mu-lam)^3.
A second exact oracle is the mirror identity d2(p) = d2(-p): evaluating
the signed-eps series of the same queue at -eps swaps p for -p, flips d1
and preserves d2 — this ties the added-departure representation (used for
p >= 0) to the independent-pair representation (used for p <= 0) with no
shared code path.
"""

import math

import numpy as np
import pytest
from numpy.random import PCG64

from qpert import coefficients as co
from qpert.analytic import busy_moments
from qpert.environment import FiniteCtmcEnvironment
from qpert.errors import QpertError
from qpert.kernels import busy_batch
from qpert.perturbation import PerturbationSpec

from conftest import assert_within_se


def exact_constant_d1(c, params):
    return c / (params.mu - params.lam) ** 2


def exact_constant_d2(c, params):
    return -(c * c) / (params.mu - params.lam) ** 3


def added_closed_form_two_state(params):
    """For the symmetric flip chain with p = (0, 1):
    r_pp(v) = 1/4 + (1/4) e^{-2v}, so the one-term coefficient is the
    exponential-decay gap at alpha = 2 plus the mean-square term."""
    mean_sq_term = -0.25 * busy_moments(params).E_B2 / (2.0 * params.mu)
    return co.rsr_gap_exponential(2.0, 0.25, params).value + mean_sq_term


class TestFirstOrder:
    def test_zero(self, params, env_two_state):
        spec = PerturbationSpec(env_two_state, [0.0, 0.0])
        est = co.first_order_coeff(params, spec)
        assert est.value == 0.0
        assert est.method == co.CLOSED_FORM

    def test_two_state_values(self, params, spec_up, spec_down, spec_mixed):
        assert co.first_order_coeff(params, spec_up).value == pytest.approx(0.5)
        assert co.first_order_coeff(params, spec_down).value == pytest.approx(-0.5)
        assert co.first_order_coeff(params, spec_mixed).value == pytest.approx(0.0)

    def test_constant(self, params, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        assert co.first_order_coeff(params, spec).value == pytest.approx(
            exact_constant_d1(1.0, params)
        )


class TestConstantGate:
    """Mandatory: the full pipeline reproduces the geometric expansion."""

    def test_added_component_constant(self, params, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        est = co.added_second_order(params, env_const, spec, 150_000, seed=51)
        assert_within_se(est.value, exact_constant_d2(1.0, params), est.std_error, 3.0)

    def test_canceled_component_constant(self, params, env_const):
        spec = PerturbationSpec(env_const, [-1.0])
        est = co.canceled_second_order(params, env_const, spec, 150_000, seed=52)
        # canceled enters the gap with a minus sign: d2 = -canceled here
        assert_within_se(-est.value, exact_constant_d2(1.0, params), est.std_error, 3.0)

    @pytest.mark.parametrize("c", [1.0, -1.0, 0.5])
    def test_full_d2_constant(self, params, env_const, c):
        spec = PerturbationSpec(env_const, [c])
        est = co.second_order_coeff(params, env_const, spec, 150_000, seed=53)
        assert_within_se(est.value, exact_constant_d2(c, params), est.std_error, 3.0)

    def test_one_signed_components_vanish_exactly(self, params, env_const):
        up = PerturbationSpec(env_const, [1.0])
        down = PerturbationSpec(env_const, [-1.0])
        assert co.canceled_second_order(params, env_const, up, 1000, seed=1).value == 0.0
        assert co.added_second_order(params, env_const, down, 1000, seed=1).value == 0.0


class TestTwoStateSecondOrder:
    def test_added_matches_closed_form(self, params, env_two_state, spec_up):
        est = co.added_second_order(params, env_two_state, spec_up, 200_000, seed=61)
        assert_within_se(est.value, added_closed_form_two_state(params), est.std_error, 3.0)

    def test_covariance_form_identity(self, params, env_two_state, spec_up):
        # for p >= 0 the covariance form and the added component are two
        # evaluations of the same coefficient
        a = co.added_second_order(params, env_two_state, spec_up, 150_000, seed=62)
        c = co.second_order_covariance_form(params, env_two_state, spec_up, 150_000, seed=63)
        se = math.hypot(a.std_error, c.std_error)
        assert_within_se(a.value, c.value, se, 3.0, "covariance-form identity")

    def test_covariance_form_rejects_signed(self, params, env_two_state, spec_down, spec_mixed):
        for spec in (spec_down, spec_mixed):
            with pytest.raises(QpertError):
                co.second_order_covariance_form(params, env_two_state, spec, 1000, seed=0)

    @pytest.mark.parametrize(
        "p, p_mirror",
        [([0.0, 1.0], [0.0, -1.0]), ([-1.0, 1.0], [1.0, -1.0]), ([0.3, -0.9], [-0.3, 0.9])],
    )
    def test_mirror_identity(self, params, env_two_state, p, p_mirror):
        # d2(p) = d2(-p): exact consequence of the signed-eps series
        spec = PerturbationSpec(env_two_state, p)
        mirror = PerturbationSpec(env_two_state, p_mirror)
        a = co.second_order_coeff(params, env_two_state, spec, 200_000, seed=64)
        b = co.second_order_coeff(params, env_two_state, mirror, 200_000, seed=65)
        se = math.hypot(a.std_error, b.std_error)
        assert_within_se(a.value, b.value, se, 3.0, f"mirror {p}")

    def test_estimate_metadata(self, params, env_two_state, spec_up):
        est = co.added_second_order(params, env_two_state, spec_up, 50_000, seed=66)
        assert est.method == co.SEMI_ANALYTIC_MC
        assert est.std_error > 0
        assert est.n_replicas == 50_000

    def test_components_match_class_restricted_fits(self, params, env_two_state, spec_mixed):
        # The replica classification splits the simulated gap, and the
        # class-restricted means must recover the added / canceled
        # components of d2 separately.  Unlike the total gap — whose cubic
        # terms largely cancel between the classes — each restricted
        # series carries a sizable eps^3 part, so subtract the known
        # first-order coefficient and fit c2*eps^2 + c3*eps^3.
        from numpy.random import PCG64

        from qpert.coupled import build_plan
        from qpert.kernels import coupled_batch

        eps_grid = np.asarray([0.02, 0.05, 0.10, 0.15])
        n = 2_000_000
        gap_sq = params.mu - params.lam
        first_order = {"added": spec_mixed.mean_p_plus / gap_sq**2,
                       "canceled": spec_mixed.mean_p_minus / gap_sq**2}
        means = {"added": np.empty(4), "canceled": np.empty(4)}
        ses = {"added": np.empty(4), "canceled": np.empty(4)}
        for i, eps in enumerate(eps_grid):
            plan = build_plan(params.with_eps(float(eps)), env_two_state, spec_mixed)
            out = coupled_batch(PCG64(7100 + i), plan, n, 10**7)
            diff = out["b_std"] - out["b_pert"]
            restricted = {
                "added": np.where(out["cls"] == 1, diff, 0.0),
                "canceled": np.where((out["cls"] == 2) | (out["cls"] == 3), -diff, 0.0),
            }
            for key, vals in restricted.items():
                means[key][i] = vals.mean()
                ses[key][i] = vals.std(ddof=1) / math.sqrt(n)
        targets = {
            "added": co.added_second_order(params, env_two_state, spec_mixed, 400_000, seed=71),
            "canceled": co.canceled_second_order(params, env_two_state, spec_mixed, 400_000, seed=72),
        }
        for key in ("added", "canceled"):
            y = means[key] - first_order[key] * eps_grid
            x = np.column_stack([eps_grid**2, eps_grid**3])
            w = 1.0 / ses[key] ** 2
            cov = np.linalg.inv(x.T @ (w[:, None] * x))
            c2_fit, _ = cov @ (x.T @ (w * y))
            se = math.hypot(math.sqrt(cov[0, 0]), targets[key].std_error)
            assert_within_se(c2_fit, targets[key].value, se, 3.0, f"{key} component fit")

    def test_mirror_identity_non_reversible_chain(self, params):
        # nothing assumes reversibility: the forward and backward cross
        # correlations differ on this chain, yet the sign-flip identity
        # d2(p) = d2(-p) must still hold
        env = FiniteCtmcEnvironment(
            [[-2.0, 1.5, 0.5], [0.3, -0.8, 0.5], [1.0, 2.0, -3.0]]
        )
        p = [0.8, -1.0, 0.4]
        fwd = env.correlation_structure(np.maximum(p, 0.0), np.maximum(np.negative(p), 0.0))
        bwd = env.correlation_structure(np.maximum(np.negative(p), 0.0), np.maximum(p, 0.0))
        assert abs(fwd.value(0.4) - bwd.value(0.4)) > 1e-4  # genuinely asymmetric
        spec = PerturbationSpec(env, p)
        mirror = PerturbationSpec(env, [-x for x in p])
        a = co.second_order_coeff(params, env, spec, 200_000, seed=67)
        b = co.second_order_coeff(params, env, mirror, 200_000, seed=68)
        se = math.hypot(a.std_error, b.std_error)
        assert_within_se(a.value, b.value, se, 3.0, "non-reversible mirror")


class TestExponentialDecayGap:
    def test_zero_alpha_limit(self, params):
        est = co.rsr_gap_exponential(0.0, 0.25, params)
        assert est.value == pytest.approx(-0.25)
        assert est.method == co.CLOSED_FORM

    def test_shape_on_grid(self, params):
        alphas = np.asarray([0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0])
        vals = np.asarray([co.rsr_gap_exponential(a, 0.25, params).value for a in alphas])
        assert np.all(vals <= 0)
        assert np.all(np.diff(vals) > 0)  # non-decreasing in alpha
        slopes = np.diff(vals) / np.diff(alphas)
        assert np.all(np.diff(slopes) < 0)  # concave
        assert vals[-1] > -0.25 * 0.1  # nearly gone by alpha = 16

    def test_large_alpha_vanishes(self, params):
        assert co.rsr_gap_exponential(1e6, 0.25, params).value == pytest.approx(0.0, abs=1e-6)

    def test_against_simulated_integral(self, params):
        # independent oracle: hand antiderivative of int_0^B (B-v) e^{-2v} dv
        # averaged over simulated busy periods
        n = 200_000
        lengths, _, _, st = busy_batch(PCG64(71), 1.0, 2.0, n, 10**7)
        assert not st.any()
        g = lengths / 2.0 - 0.25 + np.exp(-2.0 * lengths) / 4.0
        vals = -(0.25 / params.mu) * g
        se = vals.std(ddof=1) / math.sqrt(n)
        assert_within_se(
            vals.mean(), co.rsr_gap_exponential(2.0, 0.25, params).value, se, 3.0
        )

    def test_excess_laplace_identity(self, params):
        for alpha in (0.3, 1.0, 2.0, 7.0):
            lap = co.excess_laplace(alpha, params)
            assert 0.0 < lap < 1.0
            via_lap = -0.25 * lap / (params.mu - params.lam) ** 3
            assert co.rsr_gap_exponential(alpha, 0.25, params).value == pytest.approx(
                via_lap, abs=1e-12
            )
        assert co.excess_laplace(0.0, params) == 1.0

    def test_negative_alpha_rejected(self, params):
        with pytest.raises(ValueError):
            co.rsr_gap_exponential(-1.0, 0.25, params)


class TestRsrGap:
    def test_constant_is_exactly_zero(self, params, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        est = co.rsr_second_order_gap(params, env_const, spec, n_replicas=5000, seed=81)
        assert est.value == 0.0

    def test_two_state_matches_exponential_closed_form(self, params, env_two_state, spec_up):
        est = co.rsr_second_order_gap(params, env_two_state, spec_up, n_replicas=200_000, seed=82)
        target = co.rsr_gap_exponential(2.0, 0.25, params).value
        assert_within_se(est.value, target, est.std_error, 3.0, "rsr nonneg")
        assert est.value < 0

    def test_nonpositive_side_matches_mirror(self, params, env_two_state, spec_down):
        est = co.rsr_second_order_gap(params, env_two_state, spec_down, n_replicas=200_000, seed=83)
        target = co.rsr_gap_exponential(2.0, 0.25, params).value
        assert_within_se(est.value, target, est.std_error, 3.0, "rsr nonpos")
        assert est.value < 0

    def test_side_mismatch_rejected(self, params, env_two_state, spec_up, spec_down, spec_mixed):
        with pytest.raises(QpertError):
            co.rsr_second_order_gap(params, env_two_state, spec_up, side="nonpos")
        with pytest.raises(QpertError):
            co.rsr_second_order_gap(params, env_two_state, spec_down, side="nonneg")
        with pytest.raises(QpertError):
            co.rsr_second_order_gap(params, env_two_state, spec_mixed)


class TestFastEnvironments:
    def test_constant_invariant_under_scaling(self, params, env_const):
        spec = PerturbationSpec(env_const, [0.7])
        pts = co.fast_env_sweep(params, env_const, spec, [1.0, 5.0, 100.0], 50_000, seed=91)
        vals = [p.estimate.value for p in pts]
        assert vals[0] == vals[1] == vals[2]  # scaling a constant does nothing
        limit = co.fast_env_limit(params, spec).value
        assert limit == pytest.approx(0.49)
        # and the sweep sits on its own limit up to Monte Carlo error
        assert_within_se(vals[0], limit, pts[0].estimate.std_error, 3.0)

    def test_two_state_limit_value(self, params, spec_up):
        assert co.fast_env_limit(params, spec_up).value == pytest.approx(0.25)

    def test_monotone_approach(self, params, env_two_state, spec_up):
        pts = co.fast_env_sweep(
            params, env_two_state, spec_up, [1.0, 4.0, 16.0, 64.0], 200_000, seed=92
        )
        limit = co.fast_env_limit(params, spec_up).value
        dist = [abs(p.estimate.value - limit) for p in pts]
        ses = [p.estimate.std_error for p in pts]
        for k in range(len(dist) - 1):
            slack = 3.0 * math.hypot(ses[k], ses[k + 1])
            assert dist[k + 1] < dist[k] + slack
        assert dist[-1] <= 3.0 * ses[-1] + 5e-3

    def test_alpha_validation(self, params, env_two_state, spec_up):
        with pytest.raises(ValueError):
            co.fast_env_sweep(params, env_two_state, spec_up, [0.0], 1000, seed=0)


class TestEstimateType:
    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            co.CoefficientEstimate(1.0, 0.0, 10, co.SEMI_ANALYTIC_MC)
        with pytest.raises(ValueError):
            co.CoefficientEstimate(1.0, 0.1, 10, co.CLOSED_FORM)

    def test_arithmetic(self):
        a = co.CoefficientEstimate(1.0, 0.3, 10, co.SEMI_ANALYTIC_MC)
        b = co.CoefficientEstimate(2.0, 0.4, 20, co.SEMI_ANALYTIC_MC)
        s = a - b
        assert s.value == -1.0
        assert s.std_error == pytest.approx(0.5)
        assert (-a).value == -1.0
        c = co.CoefficientEstimate(5.0, 0.0, 0, co.CLOSED_FORM)
        assert (a + c).std_error == pytest.approx(0.3)
