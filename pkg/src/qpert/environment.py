"""Stationary Markov environment models.

Two concrete environments modulate the service rate: a finite-state
continuous-time Markov chain given by its generator matrix, and a
mean-reverting Gaussian (Ornstein-Uhlenbeck-type) diffusion sampled
exactly at query times.  Both support stationary draws, forward path
sessions queried at non-decreasing times, analytic correlation functions,
and time scaling (``X(alpha * t)``), which for these models is exactly a
rescaling of the generator / reversion rate.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtri
from scipy.stats import poisson

from .correlation import ExpMixture
from .errors import QpertError

UNIFORMIZATION_TOL = 1e-12


@dataclass(frozen=True)
class Affine:
    """Affine state function ``a + b * x`` (admits exact Gaussian moments)."""

    a: float
    b: float

    def __call__(self, x):
        return self.a + self.b * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class ClippedAffine:
    """``clip(a + b * x, lo, hi)`` — a bounded function on the real line."""

    a: float
    b: float
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo <= self.hi:
            raise ValueError("need lo <= hi")

    def __call__(self, x):
        return np.clip(self.a + self.b * np.asarray(x, dtype=float), self.lo, self.hi)


def _is_affine_like(f) -> bool:
    return isinstance(f, (Affine, ClippedAffine))


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _std_norm_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / _SQRT_2PI


def _winsorized_mean(nu_c: float, tau: float, lo: float, hi: float) -> float:
    """``E[clip(W, lo, hi)]`` for ``W ~ N(nu_c, tau^2)`` (standard
    truncated-normal algebra; infinite bounds drop their terms)."""
    from scipy.special import ndtr

    if tau == 0.0:
        return min(max(nu_c, lo), hi)
    lo_ok = math.isfinite(lo)
    hi_ok = math.isfinite(hi)
    zlo = (lo - nu_c) / tau if lo_ok else -math.inf
    zhi = (hi - nu_c) / tau if hi_ok else math.inf
    cdf_lo = float(ndtr(zlo)) if lo_ok else 0.0
    cdf_hi = float(ndtr(zhi)) if hi_ok else 1.0
    val = nu_c * (cdf_hi - cdf_lo)
    val += tau * ((_std_norm_pdf(zlo) if lo_ok else 0.0) - (_std_norm_pdf(zhi) if hi_ok else 0.0))
    if lo_ok:
        val += lo * cdf_lo
    if hi_ok:
        val += hi * (1.0 - cdf_hi)
    return val


class EnvironmentModel(ABC):
    """Stationary ergodic Markov environment."""

    @abstractmethod
    def sample_stationary(self, gen: np.random.Generator):
        """One draw from the stationary law."""

    @abstractmethod
    def path_session(self, gen: np.random.Generator, x0=None):
        """Forward path evaluator; ``x0=None`` starts from a stationary draw."""

    @abstractmethod
    def stationary_expectation(self, f) -> float:
        """``E[f(X(0))]`` under the stationary law."""

    @abstractmethod
    def correlation_fg(self, f, g, u: float) -> float:
        """``E[f(X(0)) g(X(u))]`` under the stationary law, analytic."""

    @abstractmethod
    def correlation_structure(self, f, g) -> ExpMixture:
        """``t -> E[f(X(0)) g(X(t))]`` as an exponential mixture."""

    @abstractmethod
    def time_scale(self, alpha: float) -> "EnvironmentModel":
        """Model of ``X(alpha * t)``: same stationary law, correlations at
        lag ``u`` equal to the base model's at ``alpha * u``."""

    def covariance_structure(self, f) -> ExpMixture:
        """Autocovariance ``C_f(t) = E[f(0)f(t)] - E[f]^2`` as a mixture."""
        mean = self.stationary_expectation(f)
        return self.correlation_structure(f, f).drop_constant(mean * mean)


class _ForwardSession:
    """Shared non-decreasing-time guard for path sessions."""

    def __init__(self) -> None:
        self._last_t = 0.0

    def _check(self, t: float) -> None:
        if t < self._last_t:
            raise ValueError(
                f"path session queried backwards in time: {t} < {self._last_t}"
            )
        self._last_t = t


def _as_state_values(f, n: int) -> np.ndarray:
    """Turn a per-state table or a callable on state indices into a vector."""
    if callable(f):
        return np.asarray([float(f(i)) for i in range(n)])
    arr = np.asarray(f, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"state function must have {n} entries, got {arr.shape}")
    return arr


class FiniteCtmcEnvironment(EnvironmentModel):
    """Irreducible finite-state chain with generator ``Q``.

    The stationary vector solves ``nu Q = 0``; transition probabilities use
    uniformization with an explicit Poisson-tail truncation below 1e-12,
    and correlation structures come from the spectral decomposition of
    ``Q`` (verified against uniformization on construction of each
    structure).
    """

    def __init__(self, generator) -> None:
        q = np.asarray(generator, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("generator must be a square matrix")
        n = q.shape[0]
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            raise ValueError("off-diagonal generator entries must be >= 0")
        if np.max(np.abs(q.sum(axis=1))) > 1e-10 * max(1.0, np.abs(q).max()):
            raise ValueError("generator rows must sum to zero")
        if n > 1 and not _irreducible(off):
            raise ValueError("generator is not irreducible")
        self.generator = q
        self.n_states = n
        self.exit_rates = -np.diag(q)
        self.nu = _stationary_vector(q)
        # embedded-chain cumulative rows; absorbing-row guard for n == 1
        cum = np.zeros((n, n))
        for i in range(n):
            if self.exit_rates[i] > 0:
                row = off[i] / self.exit_rates[i]
                cum[i] = np.cumsum(row)
                cum[i, -1] = 1.0
            else:
                cum[i] = 1.0
        self.trans_cum = cum
        self.nu_cum = np.cumsum(self.nu)
        self.nu_cum[-1] = 1.0

    def sample_stationary(self, gen: np.random.Generator) -> int:
        u = gen.random()
        return int(np.searchsorted(self.nu_cum, u, side="right"))

    def path_session(self, gen: np.random.Generator, x0: int | None = None):
        start = self.sample_stationary(gen) if x0 is None else int(x0)
        return CtmcPathSession(self, gen, start)

    def stationary_expectation(self, f) -> float:
        return float(self.nu @ _as_state_values(f, self.n_states))

    def transition_matrix(self, t: float) -> np.ndarray:
        """``P(t) = exp(Q t)`` by uniformization, truncation error < 1e-12."""
        if t < 0:
            raise ValueError("t must be >= 0")
        lam = float(self.exit_rates.max())
        if lam == 0.0 or t == 0.0:
            return np.eye(self.n_states)
        p_embed = np.eye(self.n_states) + self.generator / lam
        mean = lam * t
        kmax = int(poisson.isf(UNIFORMIZATION_TOL / 10.0, mean)) + 1
        log_w = poisson.logpmf(np.arange(kmax + 1), mean)
        weights = np.exp(log_w)
        out = np.zeros_like(p_embed)
        term = np.eye(self.n_states)
        for k in range(kmax + 1):
            out += weights[k] * term
            if k < kmax:
                term = term @ p_embed
        return out

    def correlation_fg(self, f, g, u: float) -> float:
        fv = _as_state_values(f, self.n_states)
        gv = _as_state_values(g, self.n_states)
        return float((self.nu * fv) @ self.transition_matrix(u) @ gv)

    def correlation_structure(self, f, g) -> ExpMixture:
        fv = _as_state_values(f, self.n_states)
        gv = _as_state_values(g, self.n_states)
        mix = self._spectral_structure(fv, gv)
        # guard against a defective generator: spectral form must reproduce
        # the uniformization values
        scale = max(1.0, float(np.abs(fv).max() * np.abs(gv).max()))
        for u in (0.0, 0.37, 1.31):
            if abs(mix.value(u) - self.correlation_fg(fv, gv, u)) > 1e-8 * scale:
                raise QpertError(
                    "spectral correlation does not match uniformization; "
                    "generator may be defective"
                )
        return mix

    def _spectral_structure(self, fv: np.ndarray, gv: np.ndarray) -> ExpMixture:
        try:
            w, v = np.linalg.eig(self.generator)
            coef = ((self.nu * fv) @ v) * np.linalg.solve(v, gv.astype(complex))
        except np.linalg.LinAlgError as exc:
            raise QpertError(f"generator has no usable eigenbasis: {exc}") from exc
        rate = -w
        # pin the stationary eigenvalue to exactly zero
        zero = np.abs(rate) < 1e-9 * max(1.0, float(self.exit_rates.max()))
        if zero.sum() != 1:
            raise QpertError("generator must have a unique stationary mode")
        rate[zero] = 0.0
        return ExpMixture(coef, rate)

    def time_scale(self, alpha: float) -> "FiniteCtmcEnvironment":
        if alpha <= 0:
            raise ValueError("alpha must be > 0")
        return FiniteCtmcEnvironment(alpha * self.generator)


class CtmcPathSession(_ForwardSession):
    """Exact jump-chain path of a finite-state chain, queried forwards."""

    def __init__(self, env: FiniteCtmcEnvironment, gen: np.random.Generator, x0: int):
        super().__init__()
        self.env = env
        self.gen = gen
        self.state = x0
        self._next_jump = self._sojourn_end(0.0)

    def _sojourn_end(self, now: float) -> float:
        rate = self.env.exit_rates[self.state]
        if rate <= 0:
            return math.inf
        return now - math.log1p(-self.gen.random()) / rate

    def value_at(self, t: float) -> int:
        self._check(t)
        while self._next_jump <= t:
            now = self._next_jump
            u = self.gen.random()
            cum = self.env.trans_cum[self.state]
            k = 0
            while u >= cum[k]:
                k += 1
            self.state = k
            self._next_jump = self._sojourn_end(now)
        return self.state


class OuEnvironment(EnvironmentModel):
    """Stationary mean-reverting Gaussian environment.

    Reversion rate ``theta``, stationary mean ``mean`` and stationary
    variance ``variance``; the transition over a step ``h`` is Gaussian
    with mean ``m + (x - m) e^(-theta h)`` and variance
    ``variance * (1 - e^(-2 theta h))``, so paths are sampled exactly at
    the query times with no discretisation.
    """

    #: quadrature size for Gaussian expectations of non-affine functions
    GH_NODES = 160
    #: number of Mehler modes kept in correlation structures
    MEHLER_MODES = 120

    def __init__(self, theta: float, mean: float, variance: float) -> None:
        if theta <= 0:
            raise ValueError("theta must be > 0")
        if variance <= 0:
            raise ValueError("variance must be > 0")
        self.theta = theta
        self.mean = mean
        self.variance = variance
        self.sd = math.sqrt(variance)

    def sample_stationary(self, gen: np.random.Generator) -> float:
        return self.mean + self.sd * float(ndtri(gen.random()))

    def path_session(self, gen: np.random.Generator, x0: float | None = None):
        start = self.sample_stationary(gen) if x0 is None else float(x0)
        return OuPathSession(self, gen, start)

    def _gh(self) -> tuple[np.ndarray, np.ndarray]:
        z, w = hermegauss(self.GH_NODES)
        return z, w / w.sum()

    def _gh_values(self, f) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Quadrature values of ``f`` with an integrability guard: the
        outermost nodes must carry negligible weighted mass, otherwise the
        Gaussian expectation does not converge (e.g. ``exp(x^2)``)."""
        z, w = self._gh()
        vals = np.asarray([float(f(self.mean + self.sd * zi)) for zi in z])
        contrib = w * vals
        if not np.all(np.isfinite(contrib)):
            raise QpertError("state function is not integrable on the Gaussian support")
        scale = float(np.abs(contrib).sum()) + 1.0
        if max(abs(contrib[0]), abs(contrib[-1])) > 1e-9 * scale:
            raise QpertError(
                "state function grows too fast for a Gaussian expectation"
            )
        return z, w, vals

    def stationary_expectation(self, f) -> float:
        if isinstance(f, Affine):
            return f.a + f.b * self.mean
        z, w, vals = self._gh_values(f)
        return float(w @ vals)

    def correlation_fg(self, f, g, u: float) -> float:
        r = math.exp(-self.theta * u)
        if isinstance(f, Affine) and isinstance(g, Affine):
            return (f.a + f.b * self.mean) * (g.a + g.b * self.mean) + (
                f.b * g.b * self.variance * r
            )
        if _is_affine_like(f) and _is_affine_like(g):
            return self._correlation_clipped(f, g, r)
        # generic callables: Gauss-Hermite over the exact joint law (kinked
        # functions converge only polynomially here; prefer clipped-affine
        # descriptors, which take the near-exact path above)
        z, w, fv = self._gh_values(f)
        self._gh_values(g)  # integrability guard on the second factor
        s = math.sqrt(max(0.0, 1.0 - r * r))
        inner = np.empty_like(fv)
        for i, zi in enumerate(z):
            xu = self.mean + self.sd * (r * zi + s * z)
            gv = np.asarray([float(g(x)) for x in xu])
            inner[i] = w @ gv
        return float((w * fv) @ inner)

    def _correlation_clipped(self, f, g, r: float) -> float:
        """Near-exact ``E[f(X_0) g(X_u)]`` for (clipped) affine pairs.

        Conditionally on ``X_0 = x``, ``g``'s argument is Gaussian and the
        clipped mean has a closed (winsorized) form, so only a smooth 1-D
        integral with known kink locations is left for quadrature.
        """
        from scipy.integrate import quad

        ga, gb = g.a, g.b
        glo, ghi = (g.lo, g.hi) if isinstance(g, ClippedAffine) else (-math.inf, math.inf)
        tau = abs(gb) * self.sd * math.sqrt(max(0.0, 1.0 - r * r))

        def inner_mean(x: float) -> float:
            nu_c = ga + gb * (self.mean + (x - self.mean) * r)
            return _winsorized_mean(nu_c, tau, glo, ghi)

        def integrand(z: float) -> float:
            x = self.mean + self.sd * z
            return float(f(x)) * inner_mean(x) * _std_norm_pdf(z)

        # split at f's kinks (in z units) for clean adaptive behaviour
        points: list[float] = []
        if isinstance(f, ClippedAffine) and f.b != 0:
            for bound in (f.lo, f.hi):
                zk = ((bound - f.a) / f.b - self.mean) / self.sd
                if -10.0 < zk < 10.0:
                    points.append(zk)
        val, _ = quad(
            integrand, -10.0, 10.0, points=sorted(points) or None,
            epsabs=1e-11, epsrel=1e-11, limit=300,
        )
        return val

    def correlation_structure(self, f, g) -> ExpMixture:
        """Hermite (Mehler) expansion: with ``a_k(h)`` the coefficients of
        ``h`` against normalised Hermite polynomials,
        ``E[f(X_0)g(X_u)] = sum_k a_k(f) a_k(g) e^(-k theta u)``.

        Affine functions terminate at k = 1 (exact two-mode mixture);
        otherwise the series is truncated at ``MEHLER_MODES``, which leaves
        a lag-zero defect of the order of the neglected Hermite mass
        (negligible next to the Monte Carlo error of the estimators that
        consume these structures).
        """
        af = self._hermite_coeffs(f)
        ag = self._hermite_coeffs(g)
        k = np.arange(self.MEHLER_MODES + 1, dtype=float)
        coef = af * ag
        keep = np.abs(coef) > 1e-15 * max(1.0, np.abs(coef).max())
        keep[0] = True
        return ExpMixture(coef[keep], k[keep] * self.theta)

    def _hermite_coeffs(self, f) -> np.ndarray:
        """Coefficients against He_k / sqrt(k!), which keeps them O(1).

        Affine and clipped-affine functions get exact closed-form
        coefficients; anything else is projected by Gauss-Hermite
        quadrature (adequate for smooth functions only).
        """
        out = np.zeros(self.MEHLER_MODES + 1)
        if isinstance(f, Affine):
            out[0] = f.a + f.b * self.mean
            out[1] = f.b * self.sd
            return out
        if isinstance(f, ClippedAffine):
            return self._hermite_coeffs_clipped(f)
        z, w, vals = self._gh_values(f)
        he_prev = np.ones_like(z)  # He~_0
        he = z.copy()              # He~_1
        out[0] = w @ vals
        for k in range(1, self.MEHLER_MODES + 1):
            out[k] = w @ (vals * he)
            he_prev, he = he, (z * he - math.sqrt(k) * he_prev) / math.sqrt(k + 1)
        return out

    def _hermite_coeffs_clipped(self, f: ClippedAffine) -> np.ndarray:
        """Exact normalised Hermite coefficients of ``clip(A + B z, lo, hi)``
        in standardised units.

        Integrating the piecewise-linear function against ``He_k`` by parts
        collapses to ``a_k = B [He_{k-2}(z1) phi(z1) - He_{k-2}(z2) phi(z2)]
        / sqrt(k!)`` for k >= 2, where ``z1 < z2`` are the kink locations;
        ``a_0`` is the winsorized mean and ``a_1 = B (Phi(z2) - Phi(z1))``
        by Gaussian integration by parts.
        """
        from scipy.special import ndtr

        a_std = f.a + f.b * self.mean
        b_std = f.b * self.sd
        out = np.zeros(self.MEHLER_MODES + 1)
        out[0] = _winsorized_mean(a_std, abs(b_std), f.lo, f.hi)
        if b_std == 0.0:
            return out
        kinks = sorted(((f.lo - a_std) / b_std, (f.hi - a_std) / b_std))
        z1, z2 = kinks
        out[1] = b_std * (float(ndtr(z2)) - float(ndtr(z1)))
        phi1, phi2 = _std_norm_pdf(z1), _std_norm_pdf(z2)
        # normalised Hermite values He_j / sqrt(j!) at the kinks, j = k - 2
        h1_prev, h1 = 1.0, z1
        h2_prev, h2 = 1.0, z2
        roots = np.sqrt(np.arange(1.0, self.MEHLER_MODES + 2))
        for k in range(2, self.MEHLER_MODES + 1):
            j = k - 2  # He~_j values live in (h1_prev, h2_prev)
            out[k] = b_std * (h1_prev * phi1 - h2_prev * phi2) / (roots[j] * roots[j + 1])
            h1_prev, h1 = h1, (z1 * h1 - roots[j] * h1_prev) / roots[j + 1]
            h2_prev, h2 = h2, (z2 * h2 - roots[j] * h2_prev) / roots[j + 1]
        return out

    def time_scale(self, alpha: float) -> "OuEnvironment":
        if alpha <= 0:
            raise ValueError("alpha must be > 0")
        return OuEnvironment(alpha * self.theta, self.mean, self.variance)


class OuPathSession(_ForwardSession):
    """Exact forward sampling of the Gaussian environment."""

    def __init__(self, env: OuEnvironment, gen: np.random.Generator, x0: float):
        super().__init__()
        self.env = env
        self.gen = gen
        self.x = x0
        self._t = 0.0

    def value_at(self, t: float) -> float:
        self._check(t)
        dt = t - self._t
        if dt > 0:
            a = math.exp(-self.env.theta * dt)
            self.x = (
                self.env.mean
                + (self.x - self.env.mean) * a
                + self.env.sd * math.sqrt(1.0 - a * a) * float(ndtri(self.gen.random()))
            )
            self._t = t
        return self.x


def _irreducible(off: np.ndarray) -> bool:
    """Strong connectivity of the transition graph (off-diagonal support)."""
    from scipy.sparse.csgraph import connected_components

    ncomp, _ = connected_components(off > 0, directed=True, connection="strong")
    return ncomp == 1


def _stationary_vector(q: np.ndarray) -> np.ndarray:
    """Solve ``nu Q = 0`` with ``sum(nu) = 1``; residual below 1e-12."""
    n = q.shape[0]
    if n == 1:
        return np.ones(1)
    a = np.vstack([q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    nu, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = float(np.abs(nu @ q).max())
    if resid > 1e-12 * max(1.0, float(np.abs(q).max())):
        raise QpertError(f"stationary vector residual too large: {resid}")
    if np.any(nu < -1e-12):
        raise QpertError("stationary vector has negative entries")
    nu = np.clip(nu, 0.0, None)
    return nu / nu.sum()


def correlation_fg(env: EnvironmentModel, f, g, u: float, alpha: float = 1.0) -> float:
    """Module-level convenience: ``E[f(X(0)) g(X(alpha u))]``."""
    model = env if alpha == 1.0 else env.time_scale(alpha)
    return model.correlation_fg(f, g, u)
