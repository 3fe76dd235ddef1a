# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batch kernels.

Mirrors ``qpert.kernels.pykernels`` exactly, including the random-draw
protocol, so both backends produce bit-identical output from the same
bit-generator seed.  Fixed-size kernels release the GIL for the whole
replica loop; the two kernels with ragged output hold it only to grow
their buffers.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport INFINITY, NAN, exp, log1p, sqrt
from numpy.random cimport bitgen_t
from scipy.special.cython_special cimport ndtri

from .plan import ENV_CTMC, X0_STATIONARY

cnp.import_array()

BACKEND = "c"

cdef int STATUS_CAP = 1
cdef int STATUS_TIE = 2
cdef int CLASS_NONE = 0
cdef int CLASS_ADDED_ONLY = 1
cdef int CLASS_CANCELED_ONLY = 2
cdef int CLASS_CANCELED_THEN_ADDED = 3
cdef int CLASS_OTHER = 4


cdef inline bitgen_t *_rng(object bitgen):
    return <bitgen_t *> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")


cdef inline double _u(bitgen_t *rng) noexcept nogil:
    return rng.next_double(rng.state)


cdef inline double _exp_draw(bitgen_t *rng, double rate) noexcept nogil:
    return -log1p(-_u(rng)) / rate


cdef inline Py_ssize_t _pick(bitgen_t *rng, const double *cum) noexcept nogil:
    cdef double u = _u(rng)
    cdef Py_ssize_t k = 0
    while u >= cum[k]:
        k += 1
    return k


# --- environment walker ----------------------------------------------------

cdef struct Env:
    int kind            # 0 = finite chain, 1 = OU
    Py_ssize_t x_idx
    double x_val
    double t_env
    double next_jump


cdef struct EnvParams:
    Py_ssize_t nstate
    const double *exit_rates
    const double *trans_cum
    const double *nu_cum
    const double *p_plus_tab
    const double *p_minus_tab
    double theta
    double ou_mean
    double ou_sd
    double p_a
    double p_b
    double p_lo
    double p_hi
    int x0_stationary
    double x0_fixed


cdef inline void env_init(Env *env, EnvParams *ep, bitgen_t *rng, bint draw_sojourn) noexcept nogil:
    cdef double rate
    env.kind = 0 if ep.nstate > 0 else 1
    env.t_env = 0.0
    env.next_jump = INFINITY
    if env.kind == 0:
        if ep.x0_stationary:
            env.x_idx = _pick(rng, ep.nu_cum)
        else:
            env.x_idx = <Py_ssize_t> ep.x0_fixed
        env.x_val = 0.0
        if draw_sojourn:
            rate = ep.exit_rates[env.x_idx]
            if rate > 0.0:
                env.next_jump = _exp_draw(rng, rate)
    else:
        env.x_idx = 0
        if ep.x0_stationary:
            env.x_val = ep.ou_mean + ep.ou_sd * ndtri(_u(rng))
        else:
            env.x_val = ep.x0_fixed


cdef inline double env_x0_out(Env *env) noexcept nogil:
    return <double> env.x_idx if env.kind == 0 else env.x_val


cdef inline void env_advance(Env *env, EnvParams *ep, bitgen_t *rng, double t) noexcept nogil:
    cdef double rate, dt, a
    if env.kind == 0:
        while env.next_jump <= t:
            env.t_env = env.next_jump
            env.x_idx = _pick(rng, ep.trans_cum + env.x_idx * ep.nstate)
            rate = ep.exit_rates[env.x_idx]
            if rate > 0.0:
                env.next_jump = env.t_env + _exp_draw(rng, rate)
            else:
                env.next_jump = INFINITY
    else:
        dt = t - env.t_env
        if dt > 0.0:
            a = exp(-ep.theta * dt)
            env.x_val = (ep.ou_mean + (env.x_val - ep.ou_mean) * a
                         + ep.ou_sd * sqrt(1.0 - a * a) * ndtri(_u(rng)))
            env.t_env = t


cdef inline double env_p_plus(Env *env, EnvParams *ep) noexcept nogil:
    cdef double p
    if env.kind == 0:
        return ep.p_plus_tab[env.x_idx]
    p = ep.p_a + ep.p_b * env.x_val
    if p < ep.p_lo:
        p = ep.p_lo
    if p > ep.p_hi:
        p = ep.p_hi
    return p if p > 0.0 else 0.0


cdef inline double env_p_minus(Env *env, EnvParams *ep) noexcept nogil:
    cdef double p
    if env.kind == 0:
        return ep.p_minus_tab[env.x_idx]
    p = ep.p_a + ep.p_b * env.x_val
    if p < ep.p_lo:
        p = ep.p_lo
    if p > ep.p_hi:
        p = ep.p_hi
    return -p if p < 0.0 else 0.0


cdef class _PlanView:
    """Keeps the plan's numpy arrays alive while C pointers are in use."""

    cdef double[::1] exit_rates
    cdef double[:, ::1] trans_cum
    cdef double[::1] nu_cum
    cdef double[::1] p_plus_tab
    cdef double[::1] p_minus_tab
    cdef EnvParams ep

    def __init__(self, plan):
        self.exit_rates = plan.exit_rates
        self.trans_cum = plan.trans_cum
        self.nu_cum = plan.nu_cum
        self.p_plus_tab = plan.p_plus_tab
        self.p_minus_tab = plan.p_minus_tab
        if plan.env_kind == ENV_CTMC:
            self.ep.nstate = self.exit_rates.shape[0]
            self.ep.exit_rates = &self.exit_rates[0]
            self.ep.trans_cum = &self.trans_cum[0, 0]
            self.ep.nu_cum = &self.nu_cum[0]
            self.ep.p_plus_tab = &self.p_plus_tab[0]
            self.ep.p_minus_tab = &self.p_minus_tab[0]
        else:
            self.ep.nstate = 0
        self.ep.theta = plan.theta
        self.ep.ou_mean = plan.ou_mean
        self.ep.ou_sd = plan.ou_sd
        self.ep.p_a = plan.p_a
        self.ep.p_b = plan.p_b
        self.ep.p_lo = plan.p_lo
        self.ep.p_hi = plan.p_hi
        self.ep.x0_stationary = 1 if plan.x0_mode == X0_STATIONARY else 0
        self.ep.x0_fixed = plan.x0_fixed


# --- standard-queue kernels -------------------------------------------------

def busy_batch(bitgen, double lam, double mu, Py_ssize_t n, long cap):
    cdef bitgen_t *rng = _rng(bitgen)
    length_arr = np.empty(n)
    nserv_arr = np.zeros(n, dtype=np.int64)
    depsum_arr = np.zeros(n)
    status_arr = np.zeros(n, dtype=np.int8)
    cdef double[::1] length = length_arr
    cdef cnp.int64_t[::1] n_services = nserv_arr
    cdef double[::1] dep_sum = depsum_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef Py_ssize_t r
    cdef long queue, nserv, events
    cdef double next_a, next_s, dsum
    with bitgen.lock, nogil:
        for r in range(n):
            queue = 1
            next_a = _exp_draw(rng, lam)
            next_s = _exp_draw(rng, mu)
            nserv = 0
            dsum = 0.0
            events = 0
            while True:
                events += 1
                if events > cap:
                    status[r] = STATUS_CAP
                    length[r] = NAN
                    break
                if next_a < next_s:
                    queue += 1
                    next_a += _exp_draw(rng, lam)
                elif next_s < next_a:
                    queue -= 1
                    nserv += 1
                    dsum += next_s
                    if queue == 0:
                        length[r] = next_s
                        n_services[r] = nserv
                        dep_sum[r] = dsum
                        break
                    next_s += _exp_draw(rng, mu)
                else:
                    status[r] = STATUS_TIE
                    length[r] = NAN
                    break
    return length_arr, nserv_arr, depsum_arr, status_arr


def busy_departures_batch(bitgen, double lam, double mu, Py_ssize_t n, long cap):
    cdef bitgen_t *rng = _rng(bitgen)
    length_arr = np.empty(n)
    status_arr = np.zeros(n, dtype=np.int8)
    offsets_arr = np.zeros(n + 1, dtype=np.int64)
    cdef double[::1] length = length_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef cnp.int64_t[::1] dep_offsets = offsets_arr
    # expected total departures = n * E(N); start above that and double as needed
    cdef Py_ssize_t capacity = <Py_ssize_t> (2.0 * n * mu / (mu - lam)) + 64
    deps_arr = np.empty(capacity)
    cdef double[::1] deps = deps_arr
    cdef Py_ssize_t ndeps = 0, start, r
    cdef long queue, events
    cdef double next_a, next_s
    with bitgen.lock:
        for r in range(n):
            queue = 1
            next_a = _exp_draw(rng, lam)
            next_s = _exp_draw(rng, mu)
            start = ndeps
            events = 0
            while True:
                events += 1
                if events > cap:
                    status[r] = STATUS_CAP
                    length[r] = NAN
                    ndeps = start
                    break
                if next_a < next_s:
                    queue += 1
                    next_a += _exp_draw(rng, lam)
                elif next_s < next_a:
                    if ndeps == capacity:
                        capacity *= 2
                        deps_arr = np.resize(deps_arr, capacity)
                        deps = deps_arr
                    queue -= 1
                    deps[ndeps] = next_s
                    ndeps += 1
                    if queue == 0:
                        length[r] = next_s
                        break
                    next_s += _exp_draw(rng, mu)
                else:
                    status[r] = STATUS_TIE
                    length[r] = NAN
                    ndeps = start
                    break
            dep_offsets[r + 1] = ndeps
    return length_arr, offsets_arr, deps_arr[:ndeps].copy(), status_arr


def decomposition_batch(bitgen, double lam, double mu, Py_ssize_t n, long cap):
    cdef bitgen_t *rng = _rng(bitgen)
    cdef double total_rate = lam + mu
    cdef double p_arrival = lam / total_rate
    h_arr = np.zeros(n, dtype=np.int64)
    length_arr = np.empty(n)
    status_arr = np.zeros(n, dtype=np.int8)
    sub_offsets_arr = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] h_out = h_arr
    cdef double[::1] length = length_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef cnp.int64_t[::1] sub_offsets = sub_offsets_arr

    cdef Py_ssize_t sub_cap = n + 64            # E(H) = lam/mu < 1 per replica
    sub_starts_arr = np.empty(sub_cap)
    dep_counts_arr = np.empty(sub_cap, dtype=np.int64)
    cdef double[::1] sub_starts = sub_starts_arr
    cdef cnp.int64_t[::1] dep_counts = dep_counts_arr
    cdef Py_ssize_t nsub = 0

    cdef Py_ssize_t dep_cap = <Py_ssize_t> (2.0 * n * lam / (mu - lam)) + 64
    deps_arr = np.empty(dep_cap)
    cdef double[::1] deps = deps_arr
    cdef Py_ssize_t ndeps = 0

    cdef Py_ssize_t r, nsub_start, ndep_start
    cdef long h, queue, events, ndeps_sub
    cdef double t, sub_start, next_a, next_s
    cdef bint failed
    with bitgen.lock:
        for r in range(n):
            t = 0.0
            h = 0
            nsub_start = nsub
            ndep_start = ndeps
            failed = False
            while True:
                t += _exp_draw(rng, total_rate)
                if _u(rng) >= p_arrival:
                    length[r] = t
                    break
                sub_start = t
                queue = 1
                next_a = _exp_draw(rng, lam)
                next_s = _exp_draw(rng, mu)
                ndeps_sub = 0
                events = 0
                while True:
                    events += 1
                    if events > cap:
                        failed = True
                        break
                    if next_a < next_s:
                        queue += 1
                        next_a += _exp_draw(rng, lam)
                    elif next_s < next_a:
                        if ndeps == dep_cap:
                            dep_cap *= 2
                            deps_arr = np.resize(deps_arr, dep_cap)
                            deps = deps_arr
                        queue -= 1
                        deps[ndeps] = next_s
                        ndeps += 1
                        ndeps_sub += 1
                        if queue == 0:
                            break
                        next_s += _exp_draw(rng, mu)
                    else:
                        failed = True
                        status[r] = STATUS_TIE
                        break
                if failed:
                    if status[r] == 0:
                        status[r] = STATUS_CAP
                    length[r] = NAN
                    nsub = nsub_start
                    ndeps = ndep_start
                    h = 0
                    break
                if nsub == sub_cap:
                    sub_cap *= 2
                    sub_starts_arr = np.resize(sub_starts_arr, sub_cap)
                    sub_starts = sub_starts_arr
                    dep_counts_arr = np.resize(dep_counts_arr, sub_cap)
                    dep_counts = dep_counts_arr
                sub_starts[nsub] = sub_start
                dep_counts[nsub] = ndeps_sub
                nsub += 1
                t += next_s
                h += 1
            h_out[r] = h
            sub_offsets[r + 1] = nsub
    sub_starts_out = sub_starts_arr[:nsub]
    sub_remaining = np.repeat(length_arr, np.diff(sub_offsets_arr)) - sub_starts_out
    dep_offsets = np.zeros(nsub + 1, dtype=np.int64)
    if nsub:
        np.cumsum(dep_counts_arr[:nsub], out=dep_offsets[1:])
    return (h_arr, length_arr, sub_offsets_arr, sub_remaining, dep_offsets,
            deps_arr[:ndeps].copy(), status_arr)


# --- perturbed / coupled kernels ---------------------------------------------

def coupled_batch(bitgen, plan, Py_ssize_t n, long cap):
    cdef bitgen_t *rng = _rng(bitgen)
    cdef _PlanView pv = _PlanView(plan)
    cdef EnvParams *ep = &pv.ep
    cdef double lam = plan.lam, mu = plan.mu, eps = plan.eps
    cdef double add_rate = plan.add_rate
    cdef double m_dom = plan.m_dom
    cdef bint cancel_on = plan.cancel_active
    cdef bint env_on = add_rate > 0.0 or cancel_on

    b_std_arr = np.empty(n)
    b_pert_arr = np.empty(n)
    cls_arr = np.zeros(n, dtype=np.int8)
    status_arr = np.zeros(n, dtype=np.int8)
    n_add_arr = np.zeros(n, dtype=np.int64)
    n_can_arr = np.zeros(n, dtype=np.int64)
    add_b_arr = np.zeros(n, dtype=np.int64)
    add_bp_arr = np.zeros(n, dtype=np.int64)
    can_b_arr = np.zeros(n, dtype=np.int64)
    can_bp_arr = np.zeros(n, dtype=np.int64)
    x0_arr = np.empty(n)
    cdef double[::1] b_std = b_std_arr
    cdef double[::1] b_pert = b_pert_arr
    cdef cnp.int8_t[::1] cls = cls_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef cnp.int64_t[::1] n_add_eff = n_add_arr
    cdef cnp.int64_t[::1] n_can_eff = n_can_arr
    cdef cnp.int64_t[::1] add_before_b = add_b_arr
    cdef cnp.int64_t[::1] add_before_bp = add_bp_arr
    cdef cnp.int64_t[::1] can_before_b = can_b_arr
    cdef cnp.int64_t[::1] can_before_bp = can_bp_arr
    cdef double[::1] x0_out = x0_arr

    cdef Env env
    cdef Py_ssize_t r
    cdef long ls, lp, events
    cdef bint done_s, done_p, canceled, accepted
    cdef double next_a, next_s, next_c, t, b, bp, first_add, first_can
    cdef int nmin
    with bitgen.lock, nogil:
        for r in range(n):
            env_init(&env, ep, rng, env_on)
            x0_out[r] = env_x0_out(&env)
            next_a = _exp_draw(rng, lam)
            next_s = _exp_draw(rng, mu)
            next_c = _exp_draw(rng, add_rate) if add_rate > 0.0 else INFINITY
            ls = 1
            lp = 1
            done_s = False
            done_p = False
            b = NAN
            bp = NAN
            first_add = INFINITY
            first_can = INFINITY
            events = 0
            while not (done_s and done_p):
                events += 1
                if events > cap:
                    status[r] = STATUS_CAP
                    break
                t = next_a
                if next_s < t:
                    t = next_s
                if next_c < t:
                    t = next_c
                nmin = (t == next_a) + (t == next_s) + (t == next_c)
                if nmin > 1:
                    status[r] = STATUS_TIE
                    break
                if t == next_a:
                    if not done_s:
                        ls += 1
                    if not done_p:
                        lp += 1
                    next_a += _exp_draw(rng, lam)
                elif t == next_s:
                    canceled = False
                    if cancel_on:
                        env_advance(&env, ep, rng, t)
                        canceled = _u(rng) < eps * env_p_minus(&env, ep) / mu
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
                            if first_can == INFINITY:
                                first_can = t
                        else:
                            lp -= 1
                            if lp == 0:
                                bp = t
                                done_p = True
                    next_s += _exp_draw(rng, mu)
                else:
                    env_advance(&env, ep, rng, t)
                    accepted = _u(rng) < env_p_plus(&env, ep) / m_dom
                    if accepted:
                        if not done_s:
                            add_before_b[r] += 1
                        if not done_p:
                            add_before_bp[r] += 1
                            n_add_eff[r] += 1
                            if first_add == INFINITY:
                                first_add = t
                            lp -= 1
                            if lp == 0:
                                bp = t
                                done_p = True
                    next_c += _exp_draw(rng, add_rate)
            if status[r] != 0:
                b_std[r] = NAN
                b_pert[r] = NAN
                continue
            b_std[r] = b
            b_pert[r] = bp
            if n_add_eff[r] == 0 and n_can_eff[r] == 0:
                cls[r] = CLASS_NONE
            elif n_can_eff[r] == 0:
                cls[r] = CLASS_ADDED_ONLY
            elif n_add_eff[r] == 0:
                cls[r] = CLASS_CANCELED_ONLY
            elif first_can < first_add:
                cls[r] = CLASS_CANCELED_THEN_ADDED if first_add >= b else CLASS_OTHER
            else:
                cls[r] = CLASS_OTHER
    return {
        "b_std": b_std_arr,
        "b_pert": b_pert_arr,
        "cls": cls_arr,
        "n_add_eff": n_add_arr,
        "n_can_eff": n_can_arr,
        "add_before_b": add_b_arr,
        "add_before_bp": add_bp_arr,
        "can_before_b": can_b_arr,
        "can_before_bp": can_bp_arr,
        "x0": x0_arr,
        "status": status_arr,
    }


def pqueue_batch(bitgen, plan, long l0, Py_ssize_t n, long cap):
    cdef bitgen_t *rng = _rng(bitgen)
    cdef _PlanView pv = _PlanView(plan)
    cdef EnvParams *ep = &pv.ep
    cdef double lam = plan.lam, mu = plan.mu, eps = plan.eps
    cdef double add_rate = plan.add_rate
    cdef double m_dom = plan.m_dom
    cdef bint cancel_on = plan.cancel_active
    cdef bint env_on = add_rate > 0.0 or cancel_on

    length_arr = np.empty(n)
    status_arr = np.zeros(n, dtype=np.int8)
    x0_arr = np.empty(n)
    cdef double[::1] length = length_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef double[::1] x0_out = x0_arr

    cdef Env env
    cdef Py_ssize_t r
    cdef long lp, events
    cdef bint canceled
    cdef double next_a, next_s, next_c, t
    cdef int nmin
    with bitgen.lock, nogil:
        for r in range(n):
            env_init(&env, ep, rng, env_on)
            x0_out[r] = env_x0_out(&env)
            next_a = _exp_draw(rng, lam)
            next_s = _exp_draw(rng, mu)
            next_c = _exp_draw(rng, add_rate) if add_rate > 0.0 else INFINITY
            lp = l0
            events = 0
            while True:
                events += 1
                if events > cap:
                    status[r] = STATUS_CAP
                    length[r] = NAN
                    break
                t = next_a
                if next_s < t:
                    t = next_s
                if next_c < t:
                    t = next_c
                nmin = (t == next_a) + (t == next_s) + (t == next_c)
                if nmin > 1:
                    status[r] = STATUS_TIE
                    length[r] = NAN
                    break
                if t == next_a:
                    lp += 1
                    next_a += _exp_draw(rng, lam)
                elif t == next_s:
                    canceled = False
                    if cancel_on:
                        env_advance(&env, ep, rng, t)
                        canceled = _u(rng) < eps * env_p_minus(&env, ep) / mu
                    if not canceled:
                        lp -= 1
                        if lp == 0:
                            length[r] = t
                            break
                    next_s += _exp_draw(rng, mu)
                else:
                    env_advance(&env, ep, rng, t)
                    if _u(rng) < env_p_plus(&env, ep) / m_dom:
                        lp -= 1
                        if lp == 0:
                            length[r] = t
                            break
                    next_c += _exp_draw(rng, add_rate)
    return length_arr, x0_arr, status_arr


def first_points_batch(bitgen, plan, double x_max, Py_ssize_t n):
    cdef bitgen_t *rng = _rng(bitgen)
    cdef _PlanView pv = _PlanView(plan)
    cdef EnvParams *ep = &pv.ep
    cdef double mu = plan.mu, eps = plan.eps
    cdef double add_rate = plan.add_rate
    cdef double m_dom = plan.m_dom
    cdef bint cancel_on = plan.cancel_active
    cdef bint env_on = add_rate > 0.0 or cancel_on

    t_plus_arr = np.full(n, np.inf)
    t_minus_arr = np.full(n, np.inf)
    x0_arr = np.empty(n)
    cdef double[::1] t_plus = t_plus_arr
    cdef double[::1] t_minus = t_minus_arr
    cdef double[::1] x0_out = x0_arr

    cdef Env env
    cdef Py_ssize_t r
    cdef bint found_p, found_m
    cdef double next_s, next_c, t
    with bitgen.lock, nogil:
        for r in range(n):
            env_init(&env, ep, rng, env_on)
            x0_out[r] = env_x0_out(&env)
            next_s = _exp_draw(rng, mu) if cancel_on else INFINITY
            next_c = _exp_draw(rng, add_rate) if add_rate > 0.0 else INFINITY
            found_p = add_rate == 0.0
            found_m = not cancel_on
            while not (found_p and found_m):
                t = next_s if next_s < next_c else next_c
                if t > x_max:
                    break
                if next_s == next_c:
                    t_plus[r] = NAN
                    t_minus[r] = NAN
                    break
                if t == next_s:
                    env_advance(&env, ep, rng, t)
                    if not found_m and _u(rng) < eps * env_p_minus(&env, ep) / mu:
                        t_minus[r] = t
                        found_m = True
                    next_s += _exp_draw(rng, mu)
                else:
                    env_advance(&env, ep, rng, t)
                    if not found_p and _u(rng) < env_p_plus(&env, ep) / m_dom:
                        t_plus[r] = t
                        found_p = True
                    next_c += _exp_draw(rng, add_rate)
    return t_plus_arr, t_minus_arr, x0_arr


def env_functionals_batch(bitgen, plan, xs, Py_ssize_t n):
    if plan.env_kind != ENV_CTMC:
        raise ValueError("exact path integrals need the finite-chain environment")
    cdef bitgen_t *rng = _rng(bitgen)
    cdef _PlanView pv = _PlanView(plan)
    cdef EnvParams *ep = &pv.ep
    cdef double mu = plan.mu, eps = plan.eps
    cdef bint cancel_on = plan.cancel_active

    xs_arr = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] xv = xs_arr
    cdef Py_ssize_t nx = xv.shape[0]
    surv_plus_arr = np.empty((n, nx))
    surv_minus_arr = np.empty((n, nx))
    x0_arr = np.empty(n)
    cdef double[:, ::1] surv_plus = surv_plus_arr
    cdef double[:, ::1] surv_minus = surv_minus_arr
    cdef double[::1] x0_out = x0_arr

    cdef Env env
    cdef Py_ssize_t r, i
    cdef double t_cursor, integral, prod, next_s, target, jump_t
    with bitgen.lock, nogil:
        for r in range(n):
            env_init(&env, ep, rng, True)
            x0_out[r] = env_x0_out(&env)
            t_cursor = 0.0
            integral = 0.0
            prod = 1.0
            next_s = _exp_draw(rng, mu) if cancel_on else INFINITY
            for i in range(nx):
                target = xv[i]
                while next_s <= target:
                    # advance the path to the service point, accumulating
                    while env.next_jump <= next_s:
                        jump_t = env.next_jump
                        integral += ep.p_plus_tab[env.x_idx] * (jump_t - t_cursor)
                        t_cursor = jump_t
                        env_advance(&env, ep, rng, jump_t)
                    integral += ep.p_plus_tab[env.x_idx] * (next_s - t_cursor)
                    t_cursor = next_s
                    prod *= 1.0 - eps * ep.p_minus_tab[env.x_idx] / mu
                    next_s += _exp_draw(rng, mu)
                while env.next_jump <= target:
                    jump_t = env.next_jump
                    integral += ep.p_plus_tab[env.x_idx] * (jump_t - t_cursor)
                    t_cursor = jump_t
                    env_advance(&env, ep, rng, jump_t)
                integral += ep.p_plus_tab[env.x_idx] * (target - t_cursor)
                t_cursor = target
                surv_plus[r, i] = exp(-eps * integral)
                surv_minus[r, i] = prod
    return surv_plus_arr, surv_minus_arr, x0_arr
