"""Expansion coefficients of the mean busy-period gap.

Canonical orientation used throughout the package:

    E(B - B_eps) = d1 * eps + d2 * eps**2 + o(eps**2),

where ``B`` is the standard busy period and ``B_eps`` the perturbed one.
``d1`` is closed form.  ``d2`` splits over the replica classes into

    d2 = added_second_order - canceled_second_order,

the first being the eps^2 coefficient of ``E[(B - B_eps) 1_{added only}]``
and the second that of ``E[(B_eps - B) 1_{cancellation involved}]``.  Both
are "semi-analytic" Monte Carlo: the environment enters only through its
stationary correlation functions, integrated in closed form against
sampled busy-period geometry (lengths, departure epochs, regenerative
structure), so the only randomness left is the cheap M/M/1 sampling.

With ``r_fg(t) = E[f(X(0)) g(X(t))]`` and ``Psi_fg(T) = int_0^T r_fg``:

* added:    ``-(1/mu) E[ int_0^B (B-v) r_{p+,p+}(v) dv ]
            - 1/(mu^2 (1-rho)) E[ sum_{i,j} Psi_{p+,p-}(D_j^i)
            + Psi_{p-,p+}(A_i - D_j^i) ]`` over the regenerative
            decomposition (sub-period departures ``D_j^i``, remaining
            horizons ``A_i``);
* canceled: ``1/(mu^2 (1-rho)) E[ -sum_i (Psi_{p+,p-}(D_i)
            + Psi_{p-,p+}(B + T - D_i))
            + (1/mu) sum_{i,k} r_{p-,p-}(B - D_i + D'_k) ]`` over
            independent busy-period pairs ``(B, D_i)`` and ``(T, D'_k)``.

For one-signed perturbations these collapse: ``p >= 0`` gives
``canceled = 0`` and ``d2`` equal to the covariance form
``-(1/mu) E[int_0^B (B-v) r_pp(v) dv]``; ``p <= 0`` gives ``added = 0``.
A constant perturbation must reproduce the exact geometric expansion of
``1/(mu + eps*c - lam)``, which pins every sign here and is enforced by
the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analytic import DEFAULT_EVENT_CAP, busy_moments, busy_pgf_laplace
from .correlation import ExpMixture
from .environment import EnvironmentModel, FiniteCtmcEnvironment
from .errors import QpertError
from .kernels import STATUS_OK, busy_batch, busy_departures_batch, decomposition_batch
from .params import QueueParams
from .perturbation import PerturbationSpec
from .runner import as_seedseq, spawn_bitgens

CLOSED_FORM = "closed_form"
SEMI_ANALYTIC_MC = "semi_analytic_mc"


@dataclass(frozen=True)
class CoefficientEstimate:
    """A coefficient value with its Monte Carlo error (0 for closed forms)."""

    value: float
    std_error: float
    n_replicas: int
    method: str

    def __post_init__(self) -> None:
        if (self.std_error == 0.0) != (self.method == CLOSED_FORM):
            raise ValueError("std_error must be 0 exactly for closed forms")

    def __add__(self, other: "CoefficientEstimate") -> "CoefficientEstimate":
        return _combine(self.value + other.value, self, other)

    def __sub__(self, other: "CoefficientEstimate") -> "CoefficientEstimate":
        return _combine(self.value - other.value, self, other)

    def __neg__(self) -> "CoefficientEstimate":
        return CoefficientEstimate(-self.value, self.std_error, self.n_replicas, self.method)


def _combine(value: float, a: CoefficientEstimate, b: CoefficientEstimate) -> CoefficientEstimate:
    se = math.hypot(a.std_error, b.std_error)
    method = CLOSED_FORM if se == 0.0 else SEMI_ANALYTIC_MC
    return CoefficientEstimate(value, se, max(a.n_replicas, b.n_replicas), method)


def _closed(value: float) -> CoefficientEstimate:
    return CoefficientEstimate(value, 0.0, 0, CLOSED_FORM)


def _mc(values: np.ndarray, scale: float = 1.0) -> CoefficientEstimate:
    n = len(values)
    mean = float(values.mean()) * scale
    se = float(values.std(ddof=1)) * abs(scale) / math.sqrt(n) if n > 1 else 0.0
    if se == 0.0:
        return CoefficientEstimate(mean, 0.0, n, CLOSED_FORM)
    return CoefficientEstimate(mean, se, n, SEMI_ANALYTIC_MC)


def first_order_coeff(params: QueueParams, spec: PerturbationSpec) -> CoefficientEstimate:
    """``d1 = E[p] / (mu - lam)^2``, the reduced-service-rate slope."""
    return _closed(spec.mean_p / (params.mu - params.lam) ** 2)


# ---------------------------------------------------------------------------
# correlation structures for the split p = p_plus - p_minus


def _structures(env: EnvironmentModel, spec: PerturbationSpec) -> dict[str, ExpMixture | None]:
    """All cross-moment mixtures the two components need; ``None`` marks a
    product that vanishes identically because one side is zero."""
    if isinstance(env, FiniteCtmcEnvironment):
        pp, pm = np.maximum(spec.table, 0.0), np.maximum(-spec.table, 0.0)
    else:
        pp, pm = spec.p_plus, spec.p_minus
    has_p = spec.sup_p_plus > 0
    has_m = spec.sup_p_minus > 0
    return {
        "pp": env.correlation_structure(pp, pp) if has_p else None,
        "mm": env.correlation_structure(pm, pm) if has_m else None,
        "pm": env.correlation_structure(pp, pm) if has_p and has_m else None,
        "mp": env.correlation_structure(pm, pp) if has_p and has_m else None,
    }


# ---------------------------------------------------------------------------
# shared busy-period samples (drawn once, reused across a time-scale sweep)


@dataclass
class _GeometrySamples:
    """Busy-period geometry feeding the semi-analytic estimators."""

    lengths: np.ndarray                 # standard busy periods (added, term 1)
    dec_rep: np.ndarray                 # replica id per decomposition departure
    dec_dep: np.ndarray                 # departure epoch within its sub-period
    dec_rem: np.ndarray                 # remaining horizon of that sub-period
    dec_ok: np.ndarray                  # replica mask
    pair_ok: np.ndarray
    pair_horizon: np.ndarray            # B + T per pair
    pb_rep: np.ndarray                  # replica id per departure of B
    pb_dep: np.ndarray                  # departure epochs of B
    pb_from_end: np.ndarray             # B - D_i per departure
    pair_left: np.ndarray               # (B - D_i) + D'_k flattened over pairs
    pair_rep: np.ndarray                # replica id per (i, k) pair
    n: int


def draw_geometry(
    params: QueueParams, n_replicas: int, seed, event_cap: int = DEFAULT_EVENT_CAP
) -> _GeometrySamples:
    bg_busy, bg_dec, bg_b, bg_t = spawn_bitgens(seed, 4)
    lam, mu = params.lam, params.mu

    lengths, _, _, st = busy_batch(bg_busy, lam, mu, n_replicas, event_cap)
    lengths = lengths[st == STATUS_OK]

    h, dlen, sub_off, sub_rem, dep_off, deps, dst = decomposition_batch(
        bg_dec, lam, mu, n_replicas, event_cap
    )
    sub_rep = np.repeat(np.arange(n_replicas), np.diff(sub_off))
    dep_per_sub = np.diff(dep_off)
    dec_rep = np.repeat(sub_rep, dep_per_sub)
    dec_rem = np.repeat(sub_rem, dep_per_sub)

    bl, boff, bdeps, bst = busy_departures_batch(bg_b, lam, mu, n_replicas, event_cap)
    tl, toff, tdeps, tst = busy_departures_batch(bg_t, lam, mu, n_replicas, event_cap)
    pair_ok = (bst == STATUS_OK) & (tst == STATUS_OK)
    nb = np.diff(boff)
    nt = np.diff(toff)
    pb_rep = np.repeat(np.arange(n_replicas), nb)
    pb_from_end = np.repeat(bl, nb) - bdeps
    # flatten all (i, k) pairs: left = B - D_i repeated over the partner's
    # departures, right = the partner's departures gathered per pair
    sizes = nt[pb_rep]
    group_starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    within = np.arange(int(sizes.sum())) - np.repeat(group_starts, sizes)
    right_idx = np.repeat(toff[:-1][pb_rep], sizes) + within
    pair_left = np.repeat(pb_from_end, sizes) + tdeps[right_idx]
    pair_rep = np.repeat(pb_rep, sizes)

    return _GeometrySamples(
        lengths=lengths,
        dec_rep=dec_rep,
        dec_dep=deps,
        dec_rem=dec_rem,
        dec_ok=dst == STATUS_OK,
        pair_ok=pair_ok,
        pair_horizon=bl + tl,
        pb_rep=pb_rep,
        pb_dep=bdeps,
        pb_from_end=pb_from_end,
        pair_left=pair_left,
        pair_rep=pair_rep,
        n=n_replicas,
    )


def _added_from_samples(
    params: QueueParams, structs: dict, g: _GeometrySamples
) -> CoefficientEstimate:
    mu, rho = params.mu, params.rho
    if structs["pp"] is None:
        return _closed(0.0)
    term1 = _mc(structs["pp"].growth_integral(g.lengths), -1.0 / mu)
    if structs["pm"] is None:
        return term1
    # cross term over the regenerative decomposition
    vals = structs["pm"].integral(g.dec_dep) + structs["mp"].integral(g.dec_rem - g.dec_dep)
    sums = np.bincount(g.dec_rep, weights=vals, minlength=g.n)[g.dec_ok]
    term2 = _mc(sums, -1.0 / (mu**2 * (1.0 - rho)))
    return term1 + term2


def _canceled_from_samples(
    params: QueueParams, structs: dict, g: _GeometrySamples
) -> CoefficientEstimate:
    mu, rho = params.mu, params.rho
    if structs["mm"] is None:
        return _closed(0.0)
    per_rep = np.zeros(g.n)
    if structs["pm"] is not None:
        horizons = g.pair_horizon[g.pb_rep]
        vals = structs["pm"].integral(g.pb_dep) + structs["mp"].integral(horizons - g.pb_dep)
        per_rep -= np.bincount(g.pb_rep, weights=vals, minlength=g.n)
    pair_vals = structs["mm"].value(g.pair_left)
    per_rep += np.bincount(g.pair_rep, weights=pair_vals, minlength=g.n) / mu
    return _mc(per_rep[g.pair_ok], 1.0 / (mu**2 * (1.0 - rho)))


def added_second_order(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    n_replicas: int = 100_000,
    seed=0,
) -> CoefficientEstimate:
    """eps^2 coefficient of ``E[(B - B_eps) 1_{added only}]`` (zero when
    ``p <= 0``)."""
    return _added_from_samples(
        params, _structures(env, spec), draw_geometry(params, n_replicas, seed)
    )


def canceled_second_order(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    n_replicas: int = 100_000,
    seed=0,
) -> CoefficientEstimate:
    """eps^2 coefficient of ``E[(B_eps - B) 1_{cancellation involved}]``
    (zero when ``p >= 0``)."""
    return _canceled_from_samples(
        params, _structures(env, spec), draw_geometry(params, n_replicas, seed)
    )


def second_order_coeff(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    n_replicas: int = 100_000,
    seed=0,
) -> CoefficientEstimate:
    """``d2`` of the canonical gap series, ``added - canceled``.

    The two components draw independent geometry samples so the combined
    standard error is exact; everything is deterministic given the seed.
    """
    structs = _structures(env, spec)
    seed_a, seed_c = as_seedseq(seed).spawn(2)
    added = _added_from_samples(params, structs, draw_geometry(params, n_replicas, seed_a))
    canceled = _canceled_from_samples(
        params, structs, draw_geometry(params, n_replicas, seed_c)
    )
    return added - canceled


def second_order_covariance_form(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    n_replicas: int = 100_000,
    seed=0,
) -> CoefficientEstimate:
    """``d2`` for non-negative perturbations via the one-term form
    ``-(1/mu) E[int_0^B (B - v) r_pp(v) dv]``; rejects signed ``p``."""
    if spec.sup_p_minus > 0:
        raise QpertError("covariance form requires p >= 0 everywhere")
    if isinstance(env, FiniteCtmcEnvironment):
        mix = env.correlation_structure(spec.table, spec.table)
    else:
        mix = env.correlation_structure(spec.p, spec.p)
    bg = spawn_bitgens(seed, 1)[0]
    lengths, _, _, st = busy_batch(bg, params.lam, params.mu, n_replicas, DEFAULT_EVENT_CAP)
    return _mc(mix.growth_integral(lengths[st == STATUS_OK]), -1.0 / params.mu)


# ---------------------------------------------------------------------------
# reduced-service-rate comparison


def excess_laplace(alpha: float, params: QueueParams) -> float:
    """``E[e^(-alpha Z)]`` where ``Z`` is the double stationary excess of
    the busy period (density proportional to ``int_x^inf P(B >= u) du``;
    the proportionality constant is fixed by normalisation, which equals
    ``2 / E(B^2)``)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        return 1.0
    m = busy_moments(params)
    e_excess = m.E_B2 / (2.0 * m.E_B)  # mean of the single excess B*
    lap_excess = (1.0 - busy_pgf_laplace(1.0, alpha, params)) / (alpha * m.E_B)
    return (1.0 - lap_excess) / (alpha * e_excess)


def rsr_gap_exponential(alpha: float, var_p: float, params: QueueParams) -> CoefficientEstimate:
    """Closed-form second-order gap to the reduced-service-rate queue when
    the perturbation autocovariance decays as ``var_p * e^(-alpha x)``:

        lim eps^-2 E(B_hat - B_eps)
            = -(var_p/mu) * E[B/alpha - 1/alpha^2 + e^(-alpha B)/alpha^2]
            = -var_p / (mu - lam)^3 * E[e^(-alpha Z)].

    Non-positive, non-decreasing and concave in ``alpha``; tends to 0 as
    ``alpha -> inf`` and to ``-var_p/(mu - lam)^3`` as ``alpha -> 0``
    (returned exactly for ``alpha == 0``).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    m = busy_moments(params)
    if alpha == 0.0:
        return _closed(-var_p * m.E_B2 / (2.0 * params.mu))
    lap_b = busy_pgf_laplace(1.0, alpha, params)
    val = m.E_B / alpha - 1.0 / alpha**2 + lap_b / alpha**2
    return _closed(-var_p / params.mu * val)


def rsr_second_order_gap(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    side: str | None = None,
    n_replicas: int = 100_000,
    seed=0,
) -> CoefficientEstimate:
    """Semi-analytic ``lim eps^-2 E(B_hat - B_eps)`` where ``B_hat`` is the
    busy period at the averaged rate ``mu + eps E[p]``.

    ``side='nonneg'`` uses ``-(1/mu) E[int_0^B (B-v) C_p(v) dv]``;
    ``side='nonpos'`` uses
    ``-(1/(mu^3 (1-rho))) E[sum_{i,k} C_p(B - D_i + D'_k)]`` over
    independent busy-period pairs.  The sign pattern of ``p`` must match
    (the two sign cases have genuinely different representations; mixed
    perturbations are rejected).  Negative whenever ``C_p >= 0``.
    """
    if side is None:
        side = "nonneg" if spec.sup_p_minus == 0 else "nonpos"
    if side == "nonneg" and spec.sup_p_minus > 0:
        raise QpertError("side='nonneg' requires p >= 0 everywhere")
    if side == "nonpos" and spec.sup_p_plus > 0:
        raise QpertError("side='nonpos' requires p <= 0 everywhere")
    if side not in ("nonneg", "nonpos"):
        raise ValueError(f"unknown side {side!r}")
    p_repr = spec.table if isinstance(env, FiniteCtmcEnvironment) else spec.p
    cov = env.covariance_structure(p_repr)
    mu, rho = params.mu, params.rho
    if side == "nonneg":
        bg = spawn_bitgens(seed, 1)[0]
        lengths, _, _, st = busy_batch(bg, params.lam, mu, n_replicas, DEFAULT_EVENT_CAP)
        return _mc(cov.growth_integral(lengths[st == STATUS_OK]), -1.0 / mu)
    g = draw_geometry(params, n_replicas, seed)
    sums = np.bincount(g.pair_rep, weights=cov.value(g.pair_left), minlength=g.n)
    return _mc(sums[g.pair_ok], -1.0 / (mu**3 * (1.0 - rho)))


# ---------------------------------------------------------------------------
# fast environments


def fast_env_limit(params: QueueParams, spec: PerturbationSpec) -> CoefficientEstimate:
    """Limit of the eps^2 coefficient of ``E(B_eps - B)`` as the
    environment is sped up: ``E[p]^2 / (mu - lam)^3`` (the modulation
    averages out and only the reduced-rate correction survives)."""
    return _closed(spec.mean_p**2 / (params.mu - params.lam) ** 3)


@dataclass(frozen=True)
class TimeScalePoint:
    alpha: float
    estimate: CoefficientEstimate


def fast_env_sweep(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    alphas,
    n_replicas: int = 100_000,
    seed=0,
) -> list[TimeScalePoint]:
    """eps^2 coefficient of ``E(B_eps - B)`` under ``X(alpha t)`` for each
    ``alpha``, sharing geometry samples across the sweep (one independent
    set per component) so the approach to :func:`fast_env_limit` is
    monotone pathwise, not just in expectation."""
    structs = _structures(env, spec)
    seed_a, seed_c = as_seedseq(seed).spawn(2)
    g_added = draw_geometry(params, n_replicas, seed_a)
    g_canceled = draw_geometry(params, n_replicas, seed_c)
    out = []
    for alpha in alphas:
        if alpha <= 0:
            raise ValueError("alpha must be > 0")
        scaled = {
            k: (m.scale_time(alpha) if m is not None else None) for k, m in structs.items()
        }
        d2 = _added_from_samples(params, scaled, g_added) - _canceled_from_samples(
            params, scaled, g_canceled
        )
        out.append(TimeScalePoint(alpha=float(alpha), estimate=-d2))
    return out
