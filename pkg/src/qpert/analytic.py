"""Exact M/M/1 busy-period quantities and exact samplers.

Everything here concerns the *standard* queue (constant service rate
``mu``): closed-form busy-period moments, the joint transform of the busy
period and its service count, the per-count density, and event-driven
samplers for a busy period and for its regenerative decomposition.  These
are the oracles that the perturbation machinery is checked against.

Sampler draw protocol
---------------------
All samplers consume uniforms from a ``numpy.random.Generator`` one scalar
at a time and turn them into exponentials by inverse transform
(``-log1p(-u) / rate``).  The batch kernels in :mod:`qpert.kernels` follow
the exact same consumption order, so a loop over ``sample_busy_period``
reproduces ``busy_batch`` bit for bit on a stream with the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SimulationAbort
from .params import QueueParams

DEFAULT_EVENT_CAP = 10_000_000


def _exp_draw(gen: np.random.Generator, rate: float) -> float:
    # one uniform per exponential; log1p keeps u ~ 1 accurate and u = 0 finite
    return -math.log1p(-gen.random()) / rate


@dataclass(frozen=True)
class BusyMoments:
    """Closed-form busy-period moments of the standard M/M/1 queue."""

    E_B: float
    E_B2: float
    E_N: float
    E_NB: float
    E_NN1: float
    E_D: float


def busy_moments(params: QueueParams) -> BusyMoments:
    """Exact moments of the busy period ``B``, the number of services ``N``
    and the departure-time sum ``D = D_1 + ... + D_N``.

    ``E(B) = 1/(mu-lam)``, ``E(B^2) = 2/(mu^2 (1-rho)^3)``,
    ``E(N) = 1/(1-rho)``, ``E(NB) = (1+rho)/(mu (1-rho)^3)``,
    ``E(N(N-1)) = 2 mu^2 lam / (mu-lam)^3`` and
    ``E(D) = mu^2/(mu-lam)^3``.
    """
    lam, mu = params.lam, params.mu
    rho = params.rho
    gap = mu - lam
    return BusyMoments(
        E_B=1.0 / gap,
        E_B2=2.0 / (mu**2 * (1.0 - rho) ** 3),
        E_N=1.0 / (1.0 - rho),
        E_NB=(1.0 + rho) / (mu * (1.0 - rho) ** 3),
        E_NN1=2.0 * mu**2 * lam / gap**3,
        E_D=mu**2 / gap**3,
    )


def busy_pgf_laplace(z: float, xi: float, params: QueueParams) -> float:
    """Joint transform ``E(z^N e^(-xi B))`` of the busy period.

    Classical closed form
    ``(1 + rho + xi/mu - sqrt((1 + rho + xi/mu)^2 - 4 rho z)) / (2 rho)``
    for ``|z| <= 1`` and ``xi >= 0``.  At ``z=1, xi=0`` the value is 1 and
    the ``xi``-derivative there is ``-E(B)``.
    """
    if not -1.0 <= z <= 1.0:
        raise ValueError(f"need |z| <= 1, got z={z}")
    if xi < 0:
        raise ValueError(f"need xi >= 0, got xi={xi}")
    rho = params.rho
    a = 1.0 + rho + xi / params.mu
    disc = a * a - 4.0 * rho * z
    return (a - math.sqrt(disc)) / (2.0 * rho)


def interleave_probability(n: int) -> float:
    """Probability that n-1 ordered uniform arrivals interleave below n-1
    ordered uniform departures (arrival k+1 before departure k for all k).

    This is a ballot-type count: Catalan(n-1) admissible shuffles out of
    C(2n-2, n-1) equally likely ones, which simplifies to ``1/n``.  The
    closed form is validated against brute-force enumeration in the tests
    before anything downstream relies on it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1.0 / n


def busy_count_density(n: int, t: float, params: QueueParams) -> float:
    """Density (in t) of ``P(B < t, N = n)``.

    Product of the density of n-1 Poisson arrivals on (0, t), the density
    of n services ending exactly at t, and the interleaving probability
    that keeps the queue busy throughout.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if t <= 0:
        raise ValueError("t must be > 0")
    lam, mu = params.lam, params.mu
    # log-space to stay finite for large n
    k = n - 1
    log_arr = -lam * t + k * math.log(lam * t) - math.lgamma(n) if k else -lam * t
    log_dep = math.log(mu) - mu * t + (k * math.log(mu * t) - math.lgamma(n) if k else 0.0)
    return math.exp(log_arr + log_dep) * interleave_probability(n)


def busy_count_mass(n: int, params: QueueParams) -> float:
    """Exact ``P(N = n)``, i.e. ``busy_count_density`` integrated over t.

    The time integral is a Gamma integral:
    ``P(N=n) = lam^(n-1) mu^n (2n-2)! / (n! (n-1)! (lam+mu)^(2n-1))``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lam, mu = params.lam, params.mu
    log_val = (
        (n - 1) * math.log(lam)
        + n * math.log(mu)
        + math.lgamma(2 * n - 1)
        - math.lgamma(n + 1)
        - math.lgamma(n)
        - (2 * n - 1) * math.log(lam + mu)
    )
    return math.exp(log_val)


@dataclass
class BusyPeriodRealization:
    """One sampled busy period of the standard queue.

    ``departures`` are the service completion epochs ``D_1 < ... < D_N``
    (the last one equals ``length``); ``arrivals`` are the epochs
    ``A_2 <= ... <= A_N`` of the customers that joined during the period.
    The busy-path constraint is ``arrivals[k] <= departures[k]`` for every
    k, which is asserted by the property tests.
    """

    length: float
    departures: np.ndarray
    arrivals: np.ndarray

    @property
    def n_services(self) -> int:
        return len(self.departures)

    @property
    def departure_sum(self) -> float:
        return float(self.departures.sum())


def sample_busy_period(
    gen: np.random.Generator,
    params: QueueParams,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> BusyPeriodRealization:
    """Simulate one busy period by competing exponential clocks.

    Starts with a single customer at time 0 and runs the arrival and
    service streams until the queue first empties.  Raises
    :class:`SimulationAbort` if the event cap is hit (which under
    ``lam < mu`` indicates something is badly wrong rather than bad luck).
    """
    lam, mu = params.lam, params.mu
    queue = 1
    next_arrival = _exp_draw(gen, lam)
    next_service = _exp_draw(gen, mu)
    arrivals: list[float] = []
    departures: list[float] = []
    events = 0
    while True:
        events += 1
        if events > event_cap:
            raise SimulationAbort(f"busy period exceeded {event_cap} events")
        if next_arrival < next_service:
            queue += 1
            arrivals.append(next_arrival)
            next_arrival += _exp_draw(gen, lam)
        elif next_service < next_arrival:
            queue -= 1
            departures.append(next_service)
            if queue == 0:
                return BusyPeriodRealization(
                    length=next_service,
                    departures=np.asarray(departures),
                    arrivals=np.asarray(arrivals),
                )
            next_service += _exp_draw(gen, mu)
        else:  # exact floating-point tie: abort rather than pick a side
            raise SimulationAbort("simultaneous arrival and service point")


@dataclass
class BusyDecomposition:
    """Regenerative decomposition of a busy period.

    The period alternates ``h`` exponential(lam+mu) gaps each followed by a
    sub-busy period, and closes with one final gap:
    ``length = gaps[0] + sub[0].length + ... + gaps[h-1] + sub[h-1].length
    + gaps[h]``.  ``cycle_ends`` are the epochs where the queue returns to
    a single customer; ``remaining_after_sub_start[i]`` is the time from
    the start of sub-period i to the end of the whole busy period.
    """

    h: int
    gaps: np.ndarray
    sub_periods: list[BusyPeriodRealization] = field(repr=False)
    cycle_ends: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def length(self) -> float:
        return float(self.gaps.sum() + sum(s.length for s in self.sub_periods))

    @property
    def remaining_after_sub_start(self) -> np.ndarray:
        total = self.length
        starts = self.cycle_ends[:-1] + self.gaps[: self.h]
        return total - starts


def sample_busy_decomposition(
    gen: np.random.Generator,
    params: QueueParams,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> BusyDecomposition:
    """Sample a busy period through its regenerative structure.

    From a single customer, the next event comes after an exp(lam+mu) gap;
    with probability lam/(lam+mu) it is an arrival and a fresh sub-busy
    period runs until the queue is back to one customer, otherwise the gap
    ends the busy period.  The number of sub-periods is geometric with
    success probability lam/(lam+mu); reassembled, the total length is
    distributed exactly as a busy period.
    """
    lam, mu = params.lam, params.mu
    total_rate = lam + mu
    p_arrival = lam / total_rate
    gaps: list[float] = []
    subs: list[BusyPeriodRealization] = []
    ends = [0.0]
    t = 0.0
    while True:
        gap = _exp_draw(gen, total_rate)
        gaps.append(gap)
        if gen.random() < p_arrival:
            sub = sample_busy_period(gen, params, event_cap)
            subs.append(sub)
            t += gap + sub.length
            ends.append(t)
        else:
            return BusyDecomposition(
                h=len(subs),
                gaps=np.asarray(gaps),
                sub_periods=subs,
                cycle_ends=np.asarray(ends),
            )
