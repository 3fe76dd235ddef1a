"""Coupled busy periods: coupling identity, thinning laws, classification."""

import json
import math

import numpy as np
import pytest
from numpy.random import PCG64, Generator

from qpert.analytic import busy_moments
from qpert.coupled import (
    build_plan,
    estimate_mean_gap,
    first_point_survival,
    pqueue_mean,
    simulate_coupled_busy,
    simulate_pqueue_busy,
    write_event_log,
)
from qpert.kernels import coupled_batch
from qpert.params import QueueParams
from qpert.perturbation import PerturbationSpec
from qpert.sweep import rsr_reference

from conftest import assert_within_se


class TestCouplingIdentity:
    def test_zero_eps_exact_equality(self, env_two_state, spec_up):
        params = QueueParams(1.0, 2.0, 0.0)
        plan = build_plan(params, env_two_state, spec_up)
        out = coupled_batch(PCG64(1), plan, 5000, 10**7)
        assert not out["status"].any()
        assert np.array_equal(out["b_std"], out["b_pert"])
        assert np.all(out["cls"] == 0)  # every replica classified "none"

    def test_no_extra_points_means_equal(self, env_two_state, spec_up):
        params = QueueParams(1.0, 2.0, 0.05)
        plan = build_plan(params, env_two_state, spec_up)
        out = coupled_batch(PCG64(2), plan, 20_000, 10**7)
        none = out["cls"] == 0
        assert np.array_equal(out["b_std"][none], out["b_pert"][none])
        assert (~none).any()  # and some replicas did diverge

    def test_single_replica_api(self, env_two_state, spec_up):
        params = QueueParams(1.0, 2.0, 0.1)
        s = simulate_coupled_busy(PCG64(3), params, env_two_state, spec_up)
        assert s.b_standard > 0 and s.b_perturbed > 0
        assert s.event_class in ("none", "added_only")
        assert s.env_start in (0.0, 1.0)


class TestConstantPerturbation:
    def test_pqueue_mean_matches_reduced_rate(self, env_const):
        # constant p: the perturbed queue is a plain M/M/1 at rate mu + eps*c
        spec = PerturbationSpec(env_const, [1.0])
        params = QueueParams(1.0, 2.0, 0.4)
        mean, se, aborted = pqueue_mean(params, env_const, spec, 200_000, seed=11)
        assert aborted == 0
        assert_within_se(mean, 1.0 / (2.0 + 0.4 - 1.0), se, 3.0, "constant-p mean")

    def test_gap_matches_reduced_rate(self, env_const):
        spec = PerturbationSpec(env_const, [1.0])
        params = QueueParams(1.0, 2.0, 0.2)
        gap = estimate_mean_gap(params, env_const, spec, 200_000, seed=12)
        target = busy_moments(params).E_B - rsr_reference(params, spec, 0.2)
        assert_within_se(gap.value, target, gap.std_error, 3.0, "constant-p gap")

    def test_zero_eps_gap_exactly_zero(self, env_two_state, spec_up):
        params = QueueParams(1.0, 2.0, 0.0)
        gap = estimate_mean_gap(params, env_two_state, spec_up, 5000, seed=13)
        assert gap.value == 0.0
        assert gap.std_error == 0.0
        assert gap.class_counts["none"] == 5000

    def test_replica_floor(self, env_two_state, spec_up):
        with pytest.raises(ValueError):
            estimate_mean_gap(QueueParams(1, 2, 0.05), env_two_state, spec_up, 100, seed=1)


class TestPerturbedQueue:
    def test_initial_customers_validated(self, env_two_state, spec_up):
        with pytest.raises(ValueError):
            simulate_pqueue_busy(
                PCG64(0), QueueParams(1, 2, 0.1), env_two_state, spec_up,
                initial_customers=0,
            )

    def test_monotone_domination_nonpositive(self, env_two_state, spec_down):
        # with p <= 0 the perturbed busy period is longer than the standard
        # one and shorter than the worst-case rate mu0 queue, in the mean
        params = QueueParams(1.0, 2.0, 0.1)
        mean, se, _ = pqueue_mean(params, env_two_state, spec_down, 300_000, seed=21)
        low = busy_moments(params).E_B           # rate mu = 2
        high = 1.0 / (1.9 - 1.0)                 # rate mu0 = 1.9
        assert mean >= low - 3 * se
        assert mean <= high + 3 * se

    def test_expansion_prediction(self, env_two_state, spec_up):
        # nu-start mean tracks E(B) - d1*eps - d2*eps^2 at small eps
        from qpert import coefficients as co

        params = QueueParams(1.0, 2.0, 0.08)
        mean, se, _ = pqueue_mean(params, env_two_state, spec_up, 400_000, seed=22)
        d1 = co.first_order_coeff(params, spec_up).value
        d2 = co.second_order_coeff(params, env_two_state, spec_up, 100_000, seed=23)
        predicted = busy_moments(params).E_B - 0.08 * d1 - 0.08**2 * d2.value
        tol = math.hypot(se, 0.08**2 * d2.std_error) + 0.3 * 0.08**3
        assert abs(mean - predicted) <= 3 * tol


class TestThinningLaws:
    def test_long_run_intensities(self, env_two_state, spec_mixed):
        # accepted extra points must appear at rate eps*E[p+], canceled
        # service points at rate eps*E[p-], over a long stationary horizon
        eps = 0.5
        horizon = 50_000.0
        gen = Generator(PCG64(31))
        session = env_two_state.path_session(gen)
        # dominating candidates at rate eps * sup p+
        m_dom = spec_mixed.sup_p_plus
        t, n_added = 0.0, 0
        while True:
            t += -math.log1p(-gen.random()) / (eps * m_dom)
            if t > horizon:
                break
            x = session.value_at(t)
            if gen.random() < spec_mixed.p_plus[x] / m_dom:
                n_added += 1
        rate_hat = n_added / horizon
        se = math.sqrt(n_added) / horizon
        assert_within_se(rate_hat, eps * spec_mixed.mean_p_plus, se, 3.0, "added rate")

        gen2 = Generator(PCG64(32))
        session2 = env_two_state.path_session(gen2)
        mu = 2.0
        t, n_canceled = 0.0, 0
        while True:
            t += -math.log1p(-gen2.random()) / mu
            if t > horizon:
                break
            x = session2.value_at(t)
            if gen2.random() < eps * spec_mixed.p_minus[x] / mu:
                n_canceled += 1
        rate_hat = n_canceled / horizon
        se = math.sqrt(n_canceled) / horizon
        assert_within_se(rate_hat, eps * spec_mixed.mean_p_minus, se, 3.0, "canceled rate")

    def test_first_point_survival_laws(self, env_two_state, spec_mixed):
        # empirical survival of the first added/canceled point vs the
        # environment-functional representation, independent streams
        params = QueueParams(1.0, 2.0, 0.1)
        plus, minus = first_point_survival(
            params, env_two_state, spec_mixed, xs=[0.5, 1.0, 2.0],
            n_replicas=150_000, seed=33,
        )
        for chk in plus + minus:
            assert abs(chk.discrepancy) <= 3.0 * chk.combined_se, (
                f"survival mismatch at x={chk.x}: {chk.empirical} vs {chk.functional}"
            )
        # laws are nontrivial and decreasing in x
        assert plus[0].functional > plus[-1].functional
        assert minus[0].functional > minus[-1].functional


@pytest.fixture(scope="module")
def batches(env_two_state, spec_mixed):
    out = {}
    for eps in (0.05, 0.1, 0.2):
        plan = build_plan(QueueParams(1.0, 2.0, eps), env_two_state, spec_mixed)
        out[eps] = coupled_batch(PCG64(600), plan, 300_000, 10**7)
    return out


class TestClassification:
    def test_single_point_classes_scale_linearly(self, batches):
        for name, idx in (("added_only", 1), ("canceled_only", 2)):
            freq = {e: (b["cls"] == idx).mean() for e, b in batches.items()}
            ratio21 = freq[0.1] / freq[0.05]
            ratio32 = freq[0.2] / freq[0.1]
            # first-order classes: frequency/eps roughly constant
            assert 1.5 < ratio21 < 2.5, (name, freq)
            assert 1.5 < ratio32 < 2.5, (name, freq)

    def test_mixed_class_scales_quadratically(self, batches):
        freq = {e: (b["cls"] == 3).mean() for e, b in batches.items()}
        # cancel-then-add needs two extra points: frequency/eps^2 constant
        assert 2.5 < freq[0.2] / freq[0.1] < 5.5, freq
        assert freq[0.05] < freq[0.1] < freq[0.2]

    def test_other_class_contribution_is_higher_order(self, batches):
        # E[(B_eps - B) 1_other] / eps^2 must not grow as eps shrinks; the
        # leading interleavings cancel exactly (paths re-merge), so most
        # "other" replicas carry a zero difference
        norm = {}
        for eps, b in batches.items():
            other = b["cls"] == 4
            diff = b["b_pert"] - b["b_std"]
            norm[eps] = abs(diff[other].sum() / len(diff)) / eps**2
        assert norm[0.05] <= norm[0.2] + 0.05
        b = batches[0.2]
        other = b["cls"] == 4
        merged = np.asarray(b["b_pert"][other]) == np.asarray(b["b_std"][other])
        assert merged.mean() > 0.5  # re-merged paths dominate the class

    def test_one_signed_p_has_no_other(self, env_two_state, spec_up, spec_down):
        for spec in (spec_up, spec_down):
            plan = build_plan(QueueParams(1.0, 2.0, 0.2), env_two_state, spec)
            out = coupled_batch(PCG64(601), plan, 100_000, 10**7)
            assert not (out["cls"] == 4).any()
            assert not (out["cls"] == 3).any()


class TestTracedReference:
    def test_point_log_invariants(self, env_two_state, spec_mixed):
        from qpert.coupled import trace_coupled_busy

        gen = Generator(PCG64(81))
        params = QueueParams(1.0, 2.0, 0.3)
        seen_classes = set()
        for _ in range(2000):
            sample, log = trace_coupled_busy(gen, params, env_two_state, spec_mixed)
            # cancellation thins the service stream
            assert np.all(np.isin(log.canceled, log.services))
            # added points come from a separate stream
            assert not np.any(np.isin(log.added, log.services))
            # the standard period always ends at a service point; the
            # perturbed one may end at an added departure instead
            assert sample.b_standard in log.services
            assert sample.b_perturbed in log.services or sample.b_perturbed in log.added
            seen_classes.add(sample.event_class)
        assert {"none", "added_only", "canceled_only"} <= seen_classes

    def test_traced_matches_kernel_statistically(self, env_two_state, spec_mixed):
        # two independent implementations of the same coupling: compare
        # mean gaps at a chunky eps
        from qpert.coupled import trace_coupled_busy

        params = QueueParams(1.0, 2.0, 0.25)
        gen = Generator(PCG64(82))
        n = 30_000
        diffs = np.empty(n)
        for i in range(n):
            s, _ = trace_coupled_busy(gen, params, env_two_state, spec_mixed)
            diffs[i] = s.b_standard - s.b_perturbed
        gap = estimate_mean_gap(params, env_two_state, spec_mixed, 200_000, seed=83)
        se = math.hypot(diffs.std(ddof=1) / math.sqrt(n), gap.std_error)
        assert_within_se(diffs.mean(), gap.value, se, 3.0, "traced vs kernel gap")


class TestFirstOrderPointLaws:
    def test_first_point_probability_slopes(self, env_two_state, spec_mixed):
        # P(t1+ <= B)/eps and P(t1- <= B)/eps tend to E[p+]/(mu-lam) and
        # E[p-]/(mu-lam); fit the slope through the origin on a small grid
        eps_grid = np.asarray([0.01, 0.02, 0.04])
        n = 400_000
        p_plus = np.empty(len(eps_grid))
        p_minus = np.empty(len(eps_grid))
        for i, eps in enumerate(eps_grid):
            plan = build_plan(QueueParams(1.0, 2.0, float(eps)), env_two_state, spec_mixed)
            out = coupled_batch(PCG64(900 + i), plan, n, 10**7)
            p_plus[i] = (out["add_before_b"] >= 1).mean()
            p_minus[i] = (out["can_before_b"] >= 1).mean()
        for probs, mean_part in ((p_plus, spec_mixed.mean_p_plus),
                                 (p_minus, spec_mixed.mean_p_minus)):
            slope = float(probs @ eps_grid / (eps_grid @ eps_grid))
            target = mean_part / (2.0 - 1.0)
            assert abs(slope - target) <= 0.05 * target, (slope, target)


class TestAbortHandling:
    def test_aborted_replicas_flagged(self, env_two_state, spec_up):
        params = QueueParams(1.0, 2.0, 0.05)
        with pytest.warns(UserWarning, match="aborted"):
            gap = estimate_mean_gap(
                params, env_two_state, spec_up, 2000, seed=84, event_cap=4
            )
        assert gap.aborted_flagged
        assert gap.n_aborted > 0
        assert gap.n_replicas + gap.n_aborted == 2000


class TestEventLog:
    def test_roundtrip(self, tmp_path, env_two_state, spec_mixed):
        plan = build_plan(QueueParams(1.0, 2.0, 0.1), env_two_state, spec_mixed)
        out = coupled_batch(PCG64(71), plan, 200, 10**7)
        path = tmp_path / "events.jsonl"
        n = write_event_log(path, out)
        assert n == 200
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 200
        rec = json.loads(lines[0])
        assert set(rec) == {
            "replica", "b_standard", "b_perturbed", "class",
            "n_added", "n_canceled", "status",
        }
        assert rec["b_standard"] > 0
