"""Coupled simulation of the standard and perturbed busy periods.

Both queues read the same arrival and service streams.  The perturbed
queue additionally departs at accepted points of a dominating Poisson
process (rate ``eps * sup p_plus``, acceptance ``p_plus(X(t))/sup``) and
skips service points flagged as canceled (probability
``eps * p_minus(X(s)) / mu`` each).  Because the environment is evaluated
only at those candidate points, the construction carries no
time-discretisation bias — the quantities of interest are second order in
``eps``, so this matters.

Each replica is classified by how the extra points interacted with the
perturbed busy period:

* ``none`` — no effective extra point; the two busy periods are equal.
* ``added_only`` — at least one extra departure fired, no cancellation
  while the perturbed queue was busy.
* ``canceled_only`` — at least one cancellation, no extra departure.
* ``canceled_then_added`` — a cancellation first, then an extra departure
  after the standard busy period ended (inside the extension).
* ``other`` — both kinds interleaved some other way; these paths carry an
  ``o(eps^2)`` contribution to the mean gap (often exactly zero, e.g. an
  extra departure later repaired by a cancellation).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .analytic import DEFAULT_EVENT_CAP
from .environment import EnvironmentModel, FiniteCtmcEnvironment, OuEnvironment
from .errors import SimulationAbort
from .kernels import ENV_CTMC, ENV_OU, STATUS_OK, X0_FIXED, X0_STATIONARY, SimPlan
from .params import QueueParams
from .perturbation import Affine, ClippedAffine, PerturbationSpec, validate
from .runner import DEFAULT_CHUNK, as_seedseq, run_chunked

CLASS_NAMES = ("none", "added_only", "canceled_only", "canceled_then_added", "other")

#: abort fraction above which a run is reported as unreliable
ABORT_FLAG_FRACTION = 1e-6


def build_plan(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    x0=None,
) -> SimPlan:
    """Flatten (params, env, spec) into the kernel plan; validates first."""
    validate(spec, params)
    common = dict(
        lam=params.lam,
        mu=params.mu,
        eps=params.eps,
        m_dom=spec.sup_p_plus,
        pm_max=spec.sup_p_minus,
        x0_mode=X0_STATIONARY if x0 is None else X0_FIXED,
        x0_fixed=0.0 if x0 is None else float(x0),
    )
    if isinstance(env, FiniteCtmcEnvironment):
        return SimPlan(
            env_kind=ENV_CTMC,
            exit_rates=env.exit_rates,
            trans_cum=env.trans_cum,
            nu_cum=env.nu_cum,
            p_plus_tab=np.maximum(spec.table, 0.0),
            p_minus_tab=np.maximum(-spec.table, 0.0),
            **common,
        )
    if isinstance(env, OuEnvironment):
        p = spec.p
        if isinstance(p, ClippedAffine):
            pa, pb, plo, phi = p.a, p.b, p.lo, p.hi
        elif isinstance(p, Affine):
            pa, pb, plo, phi = p.a, p.b, -math.inf, math.inf
        else:  # pragma: no cover - constructor forbids this
            raise TypeError("Gaussian environments need affine/clipped-affine p")
        return SimPlan(
            env_kind=ENV_OU,
            theta=env.theta,
            ou_mean=env.mean,
            ou_sd=env.sd,
            p_a=pa,
            p_b=pb,
            p_lo=plo,
            p_hi=phi,
            **common,
        )
    raise TypeError(f"unsupported environment type {type(env).__name__}")


@dataclass
class PointProcessLog:
    """Every stream point of one coupled replica, on the whole horizon
    ``[0, max(B, B_eps)]``.

    ``canceled`` is a subset of ``services`` (cancellation thins the
    service stream); ``added`` are the accepted points of the dominating
    candidate process.  Produced by :func:`trace_coupled_busy`, which
    re-implements the coupling on top of the public path-session API — a
    deliberately independent second implementation used to cross-check the
    batch kernels.
    """

    arrivals: np.ndarray
    services: np.ndarray
    added: np.ndarray
    canceled: np.ndarray


@dataclass
class BusyPeriodSample:
    """One coupled replica."""

    b_standard: float
    b_perturbed: float
    event_class: str
    n_added_effective: int
    n_canceled_effective: int
    added_before_standard: int
    added_before_perturbed: int
    canceled_before_standard: int
    canceled_before_perturbed: int
    env_start: float


def simulate_coupled_busy(
    bitgen,
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    x0=None,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> BusyPeriodSample:
    """One coupled replica (see module docstring for the construction)."""
    plan = build_plan(params, env, spec, x0)
    out = kernels.coupled_batch(bitgen, plan, 1, event_cap)
    if out["status"][0] != STATUS_OK:
        raise SimulationAbort("replica aborted (event cap or simultaneous points)")
    return BusyPeriodSample(
        b_standard=float(out["b_std"][0]),
        b_perturbed=float(out["b_pert"][0]),
        event_class=CLASS_NAMES[int(out["cls"][0])],
        n_added_effective=int(out["n_add_eff"][0]),
        n_canceled_effective=int(out["n_can_eff"][0]),
        added_before_standard=int(out["add_before_b"][0]),
        added_before_perturbed=int(out["add_before_bp"][0]),
        canceled_before_standard=int(out["can_before_b"][0]),
        canceled_before_perturbed=int(out["can_before_bp"][0]),
        env_start=float(out["x0"][0]),
    )


def trace_coupled_busy(
    gen: np.random.Generator,
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    x0=None,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> tuple[BusyPeriodSample, PointProcessLog]:
    """One coupled replica with a full point-process log.

    Built directly on :meth:`EnvironmentModel.path_session` rather than
    the batch kernels, so it serves as an independent reference for the
    coupling construction; the draw sequence is its own (not kernel
    parity).
    """
    validate(spec, params)
    lam, mu, eps = params.lam, params.mu, params.eps
    m_dom = spec.sup_p_plus
    add_rate = eps * m_dom
    cancel_on = eps * spec.sup_p_minus > 0

    def exp_draw(rate):
        return -math.log(1.0 - gen.random()) / rate

    session = env.path_session(gen, x0)
    start = getattr(session, "state", None)
    if start is None:
        start = session.x

    def p_plus(x):
        return spec.p_plus[x] if spec.table is not None else spec.p_plus(x)

    def p_minus(x):
        return spec.p_minus[x] if spec.table is not None else spec.p_minus(x)

    arrivals, services, added, canceled = [], [], [], []
    next_a = exp_draw(lam)
    next_s = exp_draw(mu)
    next_c = exp_draw(add_rate) if add_rate > 0 else math.inf
    ls = lp = 1
    done_s = done_p = False
    b = bp = math.nan
    first_add = first_can = math.inf
    n_add_eff = n_can_eff = 0
    counts = {"ab": 0, "abp": 0, "cb": 0, "cbp": 0}
    events = 0
    while not (done_s and done_p):
        events += 1
        if events > event_cap:
            raise SimulationAbort("traced replica exceeded the event cap")
        t = min(next_a, next_s, next_c)
        if t == next_a:
            arrivals.append(t)
            if not done_s:
                ls += 1
            if not done_p:
                lp += 1
            next_a += exp_draw(lam)
        elif t == next_s:
            services.append(t)
            cancel = cancel_on and gen.random() < eps * p_minus(session.value_at(t)) / mu
            if cancel:
                canceled.append(t)
                counts["cb"] += not done_s
                counts["cbp"] += not done_p
            if not done_s:
                ls -= 1
                if ls == 0:
                    b, done_s = t, True
            if not done_p:
                if cancel:
                    n_can_eff += 1
                    first_can = min(first_can, t)
                else:
                    lp -= 1
                    if lp == 0:
                        bp, done_p = t, True
            next_s += exp_draw(mu)
        else:
            if gen.random() < p_plus(session.value_at(t)) / m_dom:
                added.append(t)
                counts["ab"] += not done_s
                if not done_p:
                    counts["abp"] += 1
                    n_add_eff += 1
                    first_add = min(first_add, t)
                    lp -= 1
                    if lp == 0:
                        bp, done_p = t, True
            next_c += exp_draw(add_rate)
    if n_add_eff == 0 and n_can_eff == 0:
        cls = "none"
    elif n_can_eff == 0:
        cls = "added_only"
    elif n_add_eff == 0:
        cls = "canceled_only"
    elif first_can < first_add:
        cls = "canceled_then_added" if first_add >= b else "other"
    else:
        cls = "other"
    sample = BusyPeriodSample(
        b_standard=b,
        b_perturbed=bp,
        event_class=cls,
        n_added_effective=n_add_eff,
        n_canceled_effective=n_can_eff,
        added_before_standard=counts["ab"],
        added_before_perturbed=counts["abp"],
        canceled_before_standard=counts["cb"],
        canceled_before_perturbed=counts["cbp"],
        env_start=float(start),
    )
    log = PointProcessLog(
        arrivals=np.asarray(arrivals),
        services=np.asarray(services),
        added=np.asarray(added),
        canceled=np.asarray(canceled),
    )
    return sample, log


def simulate_pqueue_busy(
    bitgen,
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    x0=None,
    initial_customers: int = 1,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> float:
    """One busy period of the perturbed queue started with
    ``initial_customers`` customers."""
    if initial_customers < 1:
        raise ValueError("initial_customers must be >= 1")
    plan = build_plan(params, env, spec, x0)
    length, _, status = kernels.pqueue_batch(bitgen, plan, initial_customers, 1, event_cap)
    if status[0] != STATUS_OK:
        raise SimulationAbort("replica aborted (event cap or simultaneous points)")
    return float(length[0])


@dataclass
class GapEstimate:
    """Monte Carlo estimate of ``E(B - B_eps)`` with bookkeeping."""

    value: float
    std_error: float
    n_replicas: int
    n_aborted: int
    eps: float
    mean_b_standard: float
    mean_b_perturbed: float
    se_b_perturbed: float
    class_counts: dict[str, int]
    aborted_flagged: bool


def estimate_mean_gap(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    n_replicas: int,
    seed,
    x0=None,
    chunk_size: int = DEFAULT_CHUNK,
    n_workers: int = 1,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> GapEstimate:
    """Common-random-numbers estimate of the mean busy-period gap.

    Each replica contributes the difference of its two coupled busy
    periods, which removes the O(1) busy-period variance and leaves the
    O(eps) coupling variance.  Deterministic for a fixed seed and chunk
    size; aborted replicas are counted, excluded, and flagged if their
    fraction exceeds ``ABORT_FLAG_FRACTION``.
    """
    if n_replicas < 1000:
        raise ValueError("need at least 1000 replicas for a usable gap estimate")
    plan = build_plan(params, env, spec, x0)

    def task(bitgen, n):
        out = kernels.coupled_batch(bitgen, plan, n, event_cap)
        ok = out["status"] == STATUS_OK
        diff = out["b_std"][ok] - out["b_pert"][ok]
        cls_counts = np.bincount(out["cls"][ok], minlength=len(CLASS_NAMES))
        return (
            int(ok.sum()),
            float(diff.sum()),
            float((diff * diff).sum()),
            float(out["b_std"][ok].sum()),
            float(out["b_pert"][ok].sum()),
            float((out["b_pert"][ok] ** 2).sum()),
            cls_counts,
        )

    chunks = run_chunked(task, n_replicas, seed, chunk_size, n_workers)
    n_ok = sum(c[0] for c in chunks)
    s1 = math.fsum(c[1] for c in chunks)
    s2 = math.fsum(c[2] for c in chunks)
    sb = math.fsum(c[3] for c in chunks)
    sp = math.fsum(c[4] for c in chunks)
    sp2 = math.fsum(c[5] for c in chunks)
    cls_total = sum((c[6] for c in chunks), np.zeros(len(CLASS_NAMES), dtype=np.int64))
    n_aborted = n_replicas - n_ok
    if n_ok == 0:
        raise SimulationAbort("every replica aborted")
    mean = s1 / n_ok
    var = max(0.0, (s2 - s1 * s1 / n_ok) / max(1, n_ok - 1))
    var_p = max(0.0, (sp2 - sp * sp / n_ok) / max(1, n_ok - 1))
    flagged = n_aborted / n_replicas > ABORT_FLAG_FRACTION
    if flagged:
        warnings.warn(
            f"{n_aborted}/{n_replicas} replicas aborted; estimates may be biased",
            stacklevel=2,
        )
    return GapEstimate(
        value=mean,
        std_error=math.sqrt(var / n_ok),
        n_replicas=n_ok,
        n_aborted=n_aborted,
        eps=params.eps,
        mean_b_standard=sb / n_ok,
        mean_b_perturbed=sp / n_ok,
        se_b_perturbed=math.sqrt(var_p / n_ok),
        class_counts={name: int(cls_total[i]) for i, name in enumerate(CLASS_NAMES)},
        aborted_flagged=flagged,
    )


def pqueue_mean(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    n_replicas: int,
    seed,
    initial_customers: int = 1,
    x0=None,
    chunk_size: int = DEFAULT_CHUNK,
    n_workers: int = 1,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> tuple[float, float, int]:
    """Mean perturbed busy period from ``initial_customers`` customers.

    Returns ``(mean, std_error, n_aborted)``.
    """
    plan = build_plan(params, env, spec, x0)

    def task(bitgen, n):
        length, _, status = kernels.pqueue_batch(
            bitgen, plan, initial_customers, n, event_cap
        )
        ok = status == STATUS_OK
        vals = length[ok]
        return int(ok.sum()), float(vals.sum()), float((vals * vals).sum())

    chunks = run_chunked(task, n_replicas, seed, chunk_size, n_workers)
    n_ok = sum(c[0] for c in chunks)
    s1 = math.fsum(c[1] for c in chunks)
    s2 = math.fsum(c[2] for c in chunks)
    if n_ok == 0:
        raise SimulationAbort("every replica aborted")
    mean = s1 / n_ok
    var = max(0.0, (s2 - s1 * s1 / n_ok) / max(1, n_ok - 1))
    return mean, math.sqrt(var / n_ok), n_replicas - n_ok


@dataclass
class SurvivalCheck:
    """Empirical vs environment-functional survival of the first extra point."""

    x: float
    empirical: float
    empirical_se: float
    functional: float
    functional_se: float

    @property
    def combined_se(self) -> float:
        return math.sqrt(self.empirical_se**2 + self.functional_se**2)

    @property
    def discrepancy(self) -> float:
        return self.empirical - self.functional


def first_point_survival(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    xs,
    n_replicas: int,
    seed,
    chunk_size: int = DEFAULT_CHUNK,
    n_workers: int = 1,
) -> tuple[list[SurvivalCheck], list[SurvivalCheck]]:
    """Check the survival laws of the first added / canceled point.

    The first processes' survival ``P(t_1^+ >= x)`` equals the expectation
    of ``exp(-eps int_0^x p_plus(X))`` over environment paths alone, and
    ``P(t_1^- >= x)`` equals the expected product of
    ``1 - eps p_minus(X(s_i))/mu`` over rate-``mu`` Poisson points; both
    sides are estimated from independent streams and returned per horizon.
    """
    xs = np.sort(np.asarray(xs, dtype=float))
    plan = build_plan(params, env, spec)
    x_max = float(xs[-1])

    def emp_task(bitgen, n):
        t_plus, t_minus, _ = kernels.first_points_batch(bitgen, plan, x_max, n)
        ok = ~(np.isnan(t_plus) | np.isnan(t_minus))
        counts_p = np.asarray([(t_plus[ok] >= x).sum() for x in xs])
        counts_m = np.asarray([(t_minus[ok] >= x).sum() for x in xs])
        return int(ok.sum()), counts_p, counts_m

    def fun_task(bitgen, n):
        sp, sm, _ = kernels.env_functionals_batch(bitgen, plan, xs, n)
        return (
            n,
            sp.sum(axis=0),
            (sp * sp).sum(axis=0),
            sm.sum(axis=0),
            (sm * sm).sum(axis=0),
        )

    emp_seed, fun_seed = as_seedseq(seed).spawn(2)
    emp = run_chunked(emp_task, n_replicas, emp_seed, chunk_size, n_workers)
    fun = run_chunked(fun_task, n_replicas, fun_seed, chunk_size, n_workers)

    n_emp = sum(c[0] for c in emp)
    cp = sum(c[1] for c in emp)
    cm = sum(c[2] for c in emp)
    n_fun = sum(c[0] for c in fun)
    sp1 = sum(c[1] for c in fun)
    sp2 = sum(c[2] for c in fun)
    sm1 = sum(c[3] for c in fun)
    sm2 = sum(c[4] for c in fun)

    def checks(counts, f1, f2):
        out = []
        for i, x in enumerate(xs):
            p_hat = counts[i] / n_emp
            emp_se = math.sqrt(max(0.0, p_hat * (1 - p_hat)) / n_emp)
            fmean = f1[i] / n_fun
            fvar = max(0.0, (f2[i] - f1[i] ** 2 / n_fun) / max(1, n_fun - 1))
            out.append(
                SurvivalCheck(
                    x=float(x),
                    empirical=p_hat,
                    empirical_se=emp_se,
                    functional=fmean,
                    functional_se=math.sqrt(fvar / n_fun),
                )
            )
        return out

    return checks(cp, sp1, sp2), checks(cm, sm1, sm2)


def write_event_log(path, result: dict, start_id: int = 0) -> int:
    """Write one line-delimited JSON record per replica from a
    ``coupled_batch`` result dict; returns the number of lines."""
    n = len(result["b_std"])
    with open(path, "w") as fh:
        for i in range(n):
            rec = {
                "replica": start_id + i,
                "b_standard": float(result["b_std"][i]),
                "b_perturbed": float(result["b_pert"][i]),
                "class": CLASS_NAMES[int(result["cls"][i])],
                "n_added": int(result["n_add_eff"][i]),
                "n_canceled": int(result["n_can_eff"][i]),
                "status": int(result["status"][i]),
            }
            fh.write(json.dumps(rec) + "\n")
    return n
