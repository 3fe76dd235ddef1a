"""Pure-Python batch kernels: the reference implementation.

The compiled extension (``_ckernels``) reimplements every function in this
module.  Both sides draw randomness through the identical protocol so that
results agree bit for bit for the same bit-generator seed:

* every primitive draw consumes exactly one ``next_double`` (a scalar
  ``Generator.random()`` here, the raw C call in the extension);
* exponentials are ``-log1p(-u) / rate``;
* discrete picks scan a precomputed cumulative row for the first entry
  exceeding ``u``;
* Gaussian increments use the inverse normal CDF ``ndtri(u)``.

Each kernel consumes an unspecified number of draws, so callers hand every
call its own freshly seeded stream (see ``qpert.runner``).

Event-time ties have probability zero in the model; if floating-point
arithmetic produces one anyway the replica is marked ``STATUS_TIE`` and
excluded, never silently resolved.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

from .plan import (
    CLASS_ADDED_ONLY,
    CLASS_CANCELED_ONLY,
    CLASS_CANCELED_THEN_ADDED,
    CLASS_NONE,
    CLASS_OTHER,
    ENV_CTMC,
    STATUS_CAP,
    STATUS_OK,
    STATUS_TIE,
    X0_STATIONARY,
    SimPlan,
)

INF = math.inf


def _exp(gen: np.random.Generator, rate: float) -> float:
    return -math.log1p(-gen.random()) / rate


def _pick(gen: np.random.Generator, cum: np.ndarray) -> int:
    u = gen.random()
    k = 0
    while u >= cum[k]:
        k += 1
    return k


class _EnvWalker:
    """Lazily advanced environment path, queried at increasing times."""

    __slots__ = ("plan", "gen", "kind", "x_idx", "x_val", "t_env", "next_jump")

    def __init__(self, plan: SimPlan, gen: np.random.Generator, draw_sojourn: bool):
        self.plan = plan
        self.gen = gen
        self.kind = plan.env_kind
        self.t_env = 0.0
        if plan.x0_mode == X0_STATIONARY:
            if self.kind == ENV_CTMC:
                self.x_idx = _pick(gen, plan.nu_cum)
                self.x_val = 0.0
            else:
                self.x_idx = 0
                self.x_val = plan.ou_mean + plan.ou_sd * ndtri(gen.random())
        else:
            if self.kind == ENV_CTMC:
                self.x_idx = int(plan.x0_fixed)
                self.x_val = 0.0
            else:
                self.x_idx = 0
                self.x_val = plan.x0_fixed
        self.next_jump = INF
        if self.kind == ENV_CTMC and draw_sojourn:
            rate = plan.exit_rates[self.x_idx]
            if rate > 0.0:
                self.next_jump = _exp(gen, rate)

    @property
    def x0_out(self) -> float:
        return float(self.x_idx) if self.kind == ENV_CTMC else self.x_val

    def advance(self, t: float) -> None:
        if self.kind == ENV_CTMC:
            while self.next_jump <= t:
                self.t_env = self.next_jump
                self.x_idx = _pick(self.gen, self.plan.trans_cum[self.x_idx])
                rate = self.plan.exit_rates[self.x_idx]
                self.next_jump = self.t_env + _exp(self.gen, rate) if rate > 0.0 else INF
        else:
            dt = t - self.t_env
            if dt > 0.0:
                a = math.exp(-self.plan.theta * dt)
                self.x_val = (
                    self.plan.ou_mean
                    + (self.x_val - self.plan.ou_mean) * a
                    + self.plan.ou_sd * math.sqrt(1.0 - a * a) * ndtri(self.gen.random())
                )
                self.t_env = t

    def p_plus(self) -> float:
        if self.kind == ENV_CTMC:
            return self.plan.p_plus_tab[self.x_idx]
        p = self.plan.p_a + self.plan.p_b * self.x_val
        p = min(max(p, self.plan.p_lo), self.plan.p_hi)
        return p if p > 0.0 else 0.0

    def p_minus(self) -> float:
        if self.kind == ENV_CTMC:
            return self.plan.p_minus_tab[self.x_idx]
        p = self.plan.p_a + self.plan.p_b * self.x_val
        p = min(max(p, self.plan.p_lo), self.plan.p_hi)
        return -p if p < 0.0 else 0.0


def busy_batch(bitgen, lam, mu, n, cap):
    """Simulate ``n`` standard busy periods.

    Returns ``(length, n_services, dep_sum, status)``.
    """
    gen = np.random.Generator(bitgen)
    length = np.empty(n)
    n_services = np.zeros(n, dtype=np.int64)
    dep_sum = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    for r in range(n):
        queue = 1
        next_a = _exp(gen, lam)
        next_s = _exp(gen, mu)
        nserv = 0
        dsum = 0.0
        events = 0
        while True:
            events += 1
            if events > cap:
                status[r] = STATUS_CAP
                length[r] = math.nan
                break
            if next_a < next_s:
                queue += 1
                next_a += _exp(gen, lam)
            elif next_s < next_a:
                queue -= 1
                nserv += 1
                dsum += next_s
                if queue == 0:
                    length[r] = next_s
                    n_services[r] = nserv
                    dep_sum[r] = dsum
                    break
                next_s += _exp(gen, mu)
            else:
                status[r] = STATUS_TIE
                length[r] = math.nan
                break
    return length, n_services, dep_sum, status


def busy_departures_batch(bitgen, lam, mu, n, cap):
    """Simulate ``n`` standard busy periods keeping every departure epoch.

    Returns ``(length, dep_offsets, deps, status)`` where the departures of
    replica ``r`` are ``deps[dep_offsets[r]:dep_offsets[r+1]]``.
    """
    gen = np.random.Generator(bitgen)
    length = np.empty(n)
    status = np.zeros(n, dtype=np.int8)
    dep_offsets = np.zeros(n + 1, dtype=np.int64)
    deps: list[float] = []
    for r in range(n):
        queue = 1
        next_a = _exp(gen, lam)
        next_s = _exp(gen, mu)
        start = len(deps)
        events = 0
        while True:
            events += 1
            if events > cap:
                status[r] = STATUS_CAP
                length[r] = math.nan
                del deps[start:]
                break
            if next_a < next_s:
                queue += 1
                next_a += _exp(gen, lam)
            elif next_s < next_a:
                queue -= 1
                deps.append(next_s)
                if queue == 0:
                    length[r] = next_s
                    break
                next_s += _exp(gen, mu)
            else:
                status[r] = STATUS_TIE
                length[r] = math.nan
                del deps[start:]
                break
        dep_offsets[r + 1] = len(deps)
    return length, dep_offsets, np.asarray(deps), status


def decomposition_batch(bitgen, lam, mu, n, cap):
    """Sample ``n`` busy periods via the regenerative decomposition.

    Returns ``(h, length, sub_offsets, sub_remaining, dep_offsets, deps,
    status)``: replica ``r`` owns sub-periods ``sub_offsets[r]:
    sub_offsets[r+1]``; for sub-period ``s``, ``sub_remaining[s]`` is the
    time from its start to the end of the whole busy period and
    ``deps[dep_offsets[s]:dep_offsets[s+1]]`` are its departure epochs
    relative to its own start.
    """
    gen = np.random.Generator(bitgen)
    total_rate = lam + mu
    p_arrival = lam / total_rate
    h_out = np.zeros(n, dtype=np.int64)
    length = np.empty(n)
    status = np.zeros(n, dtype=np.int8)
    sub_offsets = np.zeros(n + 1, dtype=np.int64)
    sub_starts: list[float] = []  # absolute start epoch of each sub-period
    dep_counts: list[int] = []
    deps: list[float] = []
    for r in range(n):
        t = 0.0
        h = 0
        nsub_start = len(sub_starts)
        ndep_start = len(deps)
        failed = False
        while True:
            t += _exp(gen, total_rate)
            if gen.random() >= p_arrival:
                length[r] = t
                break
            # a sub-busy period starts now; replay the busy_batch protocol
            sub_start = t
            queue = 1
            next_a = _exp(gen, lam)
            next_s = _exp(gen, mu)
            ndeps = 0
            events = 0
            while True:
                events += 1
                if events > cap:
                    failed = True
                    break
                if next_a < next_s:
                    queue += 1
                    next_a += _exp(gen, lam)
                elif next_s < next_a:
                    queue -= 1
                    deps.append(next_s)
                    ndeps += 1
                    if queue == 0:
                        break
                    next_s += _exp(gen, mu)
                else:
                    failed = True
                    status[r] = STATUS_TIE
                    break
            if failed:
                if status[r] == STATUS_OK:
                    status[r] = STATUS_CAP
                length[r] = math.nan
                del sub_starts[nsub_start:]
                del dep_counts[nsub_start:]
                del deps[ndep_start:]
                h = 0
                break
            sub_starts.append(sub_start)
            dep_counts.append(ndeps)
            t += next_s  # the sub-period spans [sub_start, sub_start + next_s]
            h += 1
        h_out[r] = h
        sub_offsets[r + 1] = len(sub_starts)
    # remaining horizon of each sub-period = replica length - its start
    sub_starts_arr = np.asarray(sub_starts)
    sub_remaining = np.repeat(length, np.diff(sub_offsets)) - sub_starts_arr
    dep_offsets = np.zeros(len(sub_starts) + 1, dtype=np.int64)
    if dep_counts:
        np.cumsum(np.asarray(dep_counts, dtype=np.int64), out=dep_offsets[1:])
    return h_out, length, sub_offsets, sub_remaining, dep_offsets, np.asarray(deps), status


def coupled_batch(bitgen, plan: SimPlan, n, cap):
    """Run ``n`` coupled (standard, perturbed) busy periods.

    Both queues share the arrival and service streams; the perturbed queue
    additionally skips services flagged as canceled (probability
    ``eps * p_minus(X(s)) / mu`` at each service point) and departs at
    accepted extra candidates (rate ``eps * m_dom`` thinned by
    ``p_plus(X(t)) / m_dom``).  Returns a dict of per-replica arrays:
    lengths of both busy periods, the event classification, effective and
    raw extra-point counts, the environment start and the status flag.
    """
    gen = np.random.Generator(bitgen)
    lam, mu, eps = plan.lam, plan.mu, plan.eps
    add_rate = plan.add_rate
    cancel_on = plan.cancel_active
    env_on = add_rate > 0.0 or cancel_on
    m_dom = plan.m_dom

    b_std = np.empty(n)
    b_pert = np.empty(n)
    cls = np.zeros(n, dtype=np.int8)
    status = np.zeros(n, dtype=np.int8)
    n_add_eff = np.zeros(n, dtype=np.int64)
    n_can_eff = np.zeros(n, dtype=np.int64)
    add_before_b = np.zeros(n, dtype=np.int64)
    add_before_bp = np.zeros(n, dtype=np.int64)
    can_before_b = np.zeros(n, dtype=np.int64)
    can_before_bp = np.zeros(n, dtype=np.int64)
    x0_out = np.empty(n)

    for r in range(n):
        env = _EnvWalker(plan, gen, draw_sojourn=env_on)
        x0_out[r] = env.x0_out
        next_a = _exp(gen, lam)
        next_s = _exp(gen, mu)
        next_c = _exp(gen, add_rate) if add_rate > 0.0 else INF
        ls = lp = 1
        done_s = done_p = False
        b = bp = math.nan
        first_add = first_can = INF
        events = 0
        while not (done_s and done_p):
            events += 1
            if events > cap:
                status[r] = STATUS_CAP
                break
            t = min(next_a, next_s, next_c)
            if (t == next_a) + (t == next_s) + (t == next_c) > 1:
                status[r] = STATUS_TIE
                break
            if t == next_a:
                if not done_s:
                    ls += 1
                if not done_p:
                    lp += 1
                next_a += _exp(gen, lam)
            elif t == next_s:
                canceled = False
                if cancel_on:
                    env.advance(t)
                    canceled = gen.random() < eps * env.p_minus() / mu
                if canceled:
                    if not done_s:
                        can_before_b[r] += 1
                    if not done_p:
                        can_before_bp[r] += 1
                if not done_s:
                    ls -= 1
                    if ls == 0:
                        b = t
                        done_s = True
                if not done_p:
                    if canceled:
                        n_can_eff[r] += 1
                        if first_can == INF:
                            first_can = t
                    else:
                        lp -= 1
                        if lp == 0:
                            bp = t
                            done_p = True
                next_s += _exp(gen, mu)
            else:
                env.advance(t)
                accepted = gen.random() < env.p_plus() / m_dom
                if accepted:
                    if not done_s:
                        add_before_b[r] += 1
                    if not done_p:
                        add_before_bp[r] += 1
                        n_add_eff[r] += 1
                        if first_add == INF:
                            first_add = t
                        lp -= 1
                        if lp == 0:
                            bp = t
                            done_p = True
                next_c += _exp(gen, add_rate)
        if status[r] != STATUS_OK:
            b_std[r] = math.nan
            b_pert[r] = math.nan
            continue
        b_std[r] = b
        b_pert[r] = bp
        na, nc = n_add_eff[r], n_can_eff[r]
        if na == 0 and nc == 0:
            cls[r] = CLASS_NONE
        elif nc == 0:
            cls[r] = CLASS_ADDED_ONLY
        elif na == 0:
            cls[r] = CLASS_CANCELED_ONLY
        elif first_can < first_add:
            cls[r] = CLASS_CANCELED_THEN_ADDED if first_add >= b else CLASS_OTHER
        else:
            cls[r] = CLASS_OTHER
    return {
        "b_std": b_std,
        "b_pert": b_pert,
        "cls": cls,
        "n_add_eff": n_add_eff,
        "n_can_eff": n_can_eff,
        "add_before_b": add_before_b,
        "add_before_bp": add_before_bp,
        "can_before_b": can_before_b,
        "can_before_bp": can_before_bp,
        "x0": x0_out,
        "status": status,
    }


def pqueue_batch(bitgen, plan: SimPlan, l0, n, cap):
    """Busy periods of the perturbed queue alone, started with ``l0``
    customers.  Returns ``(length, x0, status)``.
    """
    gen = np.random.Generator(bitgen)
    lam, mu, eps = plan.lam, plan.mu, plan.eps
    add_rate = plan.add_rate
    cancel_on = plan.cancel_active
    env_on = add_rate > 0.0 or cancel_on
    m_dom = plan.m_dom

    length = np.empty(n)
    status = np.zeros(n, dtype=np.int8)
    x0_out = np.empty(n)
    for r in range(n):
        env = _EnvWalker(plan, gen, draw_sojourn=env_on)
        x0_out[r] = env.x0_out
        next_a = _exp(gen, lam)
        next_s = _exp(gen, mu)
        next_c = _exp(gen, add_rate) if add_rate > 0.0 else INF
        lp = l0
        events = 0
        while True:
            events += 1
            if events > cap:
                status[r] = STATUS_CAP
                length[r] = math.nan
                break
            t = min(next_a, next_s, next_c)
            if (t == next_a) + (t == next_s) + (t == next_c) > 1:
                status[r] = STATUS_TIE
                length[r] = math.nan
                break
            if t == next_a:
                lp += 1
                next_a += _exp(gen, lam)
            elif t == next_s:
                canceled = False
                if cancel_on:
                    env.advance(t)
                    canceled = gen.random() < eps * env.p_minus() / mu
                if not canceled:
                    lp -= 1
                    if lp == 0:
                        length[r] = t
                        break
                next_s += _exp(gen, mu)
            else:
                env.advance(t)
                if gen.random() < env.p_plus() / m_dom:
                    lp -= 1
                    if lp == 0:
                        length[r] = t
                        break
                next_c += _exp(gen, add_rate)
    return length, x0_out, status


def first_points_batch(bitgen, plan: SimPlan, x_max, n):
    """First added and first canceled point of the extra-departure
    processes on ``[0, x_max]``, independent of any queue.

    Returns ``(t_plus, t_minus, x0)`` with ``inf`` marking "no point by
    x_max".
    """
    gen = np.random.Generator(bitgen)
    mu, eps = plan.mu, plan.eps
    add_rate = plan.add_rate
    cancel_on = plan.cancel_active
    env_on = add_rate > 0.0 or cancel_on
    m_dom = plan.m_dom

    t_plus = np.full(n, INF)
    t_minus = np.full(n, INF)
    x0_out = np.empty(n)
    for r in range(n):
        env = _EnvWalker(plan, gen, draw_sojourn=env_on)
        x0_out[r] = env.x0_out
        next_s = _exp(gen, mu) if cancel_on else INF
        next_c = _exp(gen, add_rate) if add_rate > 0.0 else INF
        found_p = add_rate == 0.0
        found_m = not cancel_on
        while not (found_p and found_m):
            t = min(next_s, next_c)
            if t > x_max:
                break
            if t == next_s and t == next_c:
                # tie: vanishing probability, resolve by skipping the replica
                t_plus[r] = math.nan
                t_minus[r] = math.nan
                break
            if t == next_s:
                env.advance(t)
                if not found_m and gen.random() < eps * env.p_minus() / mu:
                    t_minus[r] = t
                    found_m = True
                next_s += _exp(gen, mu)
            else:
                env.advance(t)
                if not found_p and gen.random() < env.p_plus() / m_dom:
                    t_plus[r] = t
                    found_p = True
                next_c += _exp(gen, add_rate)
    return t_plus, t_minus, x0_out


def env_functionals_batch(bitgen, plan: SimPlan, xs, n):
    """Environment-only estimates of the two first-point survival laws.

    For each horizon ``x`` in ``xs`` (ascending), computes per replica
    ``exp(-eps * int_0^x p_plus(X(s)) ds)`` along an exactly simulated
    finite-chain path, and the product of ``1 - eps*p_minus(X(s_i))/mu``
    over a fresh rate-``mu`` Poisson stream ``s_i <= x``.  Only the
    finite-chain environment admits the exact path integral.

    Returns ``(surv_plus, surv_minus, x0)`` with shape ``(n, len(xs))``.
    """
    if plan.env_kind != ENV_CTMC:
        raise ValueError("exact path integrals need the finite-chain environment")
    gen = np.random.Generator(bitgen)
    mu, eps = plan.mu, plan.eps
    cancel_on = plan.cancel_active
    xs = np.asarray(xs, dtype=np.float64)
    nx = len(xs)
    surv_plus = np.empty((n, nx))
    surv_minus = np.empty((n, nx))
    x0_out = np.empty(n)
    for r in range(n):
        env = _EnvWalker(plan, gen, draw_sojourn=True)
        x0_out[r] = env.x0_out
        t_cursor = 0.0
        integral = 0.0
        prod = 1.0
        next_s = _exp(gen, mu) if cancel_on else INF

        def advance_accum(t: float) -> None:
            nonlocal t_cursor, integral
            while env.next_jump <= t:
                jump_t = env.next_jump
                integral += plan.p_plus_tab[env.x_idx] * (jump_t - t_cursor)
                t_cursor = jump_t
                env.advance(jump_t)
            integral += plan.p_plus_tab[env.x_idx] * (t - t_cursor)
            t_cursor = t

        for i in range(nx):
            target = xs[i]
            while next_s <= target:
                advance_accum(next_s)
                prod *= 1.0 - eps * plan.p_minus_tab[env.x_idx] / mu
                next_s += _exp(gen, mu)
            advance_accum(target)
            surv_plus[r, i] = math.exp(-eps * integral)
            surv_minus[r, i] = prod
    return surv_plus, surv_minus, x0_out
