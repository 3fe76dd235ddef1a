"""Exponential-mixture representations of environment correlations.

Every environment model in this package can express the stationary
cross-moment ``r(t) = E[f(X(0)) g(X(t))]`` as a finite mixture
``sum_m c_m * exp(-g_m t)`` with ``Re(g_m) >= 0`` (eigenmodes of a finite
generator, possibly complex; Mehler modes ``k*theta`` for the
mean-reverting Gaussian case).  The coefficient estimators need three
functionals of ``r`` evaluated at many sampled horizons, so they are
provided in closed form, vectorised, with series fallbacks near
``rate * t = 0`` where the direct expressions cancel catastrophically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad


@dataclass(frozen=True)
class ExpMixture:
    """Finite mixture of decaying exponentials, ``sum_m coef_m e^(-rate_m t)``."""

    coef: np.ndarray
    rate: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "coef", np.atleast_1d(np.asarray(self.coef, dtype=complex)))
        object.__setattr__(self, "rate", np.atleast_1d(np.asarray(self.rate, dtype=complex)))
        if self.coef.shape != self.rate.shape:
            raise ValueError("coef and rate must have the same length")
        if np.any(self.rate.real < -1e-12):
            raise ValueError("mixture rates must have non-negative real part")

    def value(self, t):
        """Evaluate ``r(t)`` (t scalar or array, t >= 0)."""
        t = np.asarray(t, dtype=float)
        out = np.einsum("m,m...->...", self.coef, np.exp(np.multiply.outer(-self.rate, t)))
        return out.real if out.ndim else float(out.real)

    def integral(self, t):
        """``int_0^t r(s) ds``, vectorised over t >= 0."""
        t = np.asarray(t, dtype=float)
        total = np.zeros(t.shape, dtype=complex)
        for c, g in zip(self.coef, self.rate):
            total += c * _psi(g, t)
        return total.real if total.ndim else float(total.real)

    def growth_integral(self, b):
        """``int_0^b (b - v) r(v) dv``, vectorised over b >= 0."""
        b = np.asarray(b, dtype=float)
        total = np.zeros(b.shape, dtype=complex)
        for c, g in zip(self.coef, self.rate):
            total += c * _chi(g, b)
        return total.real if total.ndim else float(total.real)

    def scale_time(self, alpha: float) -> "ExpMixture":
        """Mixture of ``r(alpha * t)`` (environment sped up by ``alpha``)."""
        if alpha <= 0:
            raise ValueError("alpha must be > 0")
        return ExpMixture(self.coef.copy(), self.rate * alpha)

    def drop_constant(self, constant: float) -> "ExpMixture":
        """Subtract ``constant`` from the zero-rate mode (e.g. turn the raw
        moment ``E[p(0)p(t)]`` into the covariance by removing ``E[p]^2``)."""
        coef = self.coef.copy()
        zero = np.abs(self.rate) == 0
        if not zero.any():
            coef = np.concatenate([coef, [-constant]])
            rate = np.concatenate([self.rate, [0.0]])
            return ExpMixture(coef, rate)
        idx = int(np.argmax(zero))
        coef[idx] -= constant
        return ExpMixture(coef, self.rate)

    @property
    def constant_term(self) -> float:
        zero = np.abs(self.rate) == 0
        return float(self.coef[zero].sum().real)


def _psi(g: complex, t: np.ndarray) -> np.ndarray:
    """``int_0^t e^(-g s) ds`` with a series branch for small |g t|."""
    if g == 0:
        return t.astype(complex)
    gt = g * t
    small = np.abs(gt) < 1e-4
    out = np.empty(t.shape, dtype=complex)
    out[~small] = (1.0 - np.exp(-gt[~small])) / g
    ts = t[small]
    gts = gt[small]
    out[small] = ts * (1.0 - gts / 2.0 + gts**2 / 6.0 - gts**3 / 24.0)
    return out


def _chi(g: complex, b: np.ndarray) -> np.ndarray:
    """``int_0^b (b - v) e^(-g v) dv`` with a series branch for small |g b|."""
    if g == 0:
        return (b * b / 2.0).astype(complex)
    gb = g * b
    small = np.abs(gb) < 1e-3
    out = np.empty(b.shape, dtype=complex)
    bl = b[~small]
    out[~small] = bl / g - (1.0 - np.exp(-gb[~small])) / (g * g)
    bs = b[small]
    gbs = gb[small]
    out[small] = bs * bs / 2.0 * (1.0 - gbs / 3.0 + gbs**2 / 12.0 - gbs**3 / 60.0)
    return out


def growth_integral_quad(corr, b: float, tol: float = 1e-10) -> float:
    """Adaptive-quadrature evaluation of ``int_0^b (b - v) corr(v) dv``.

    Generic fallback (and test oracle) for correlation functions that are
    not exponential mixtures; ``corr`` is any scalar callable.
    """
    if b == 0:
        return 0.0
    val, _ = quad(lambda v: (b - v) * corr(v), 0.0, b, epsabs=tol, limit=200)
    return val


def integral_quad(corr, a: float, b: float, tol: float = 1e-10) -> float:
    """Adaptive-quadrature ``int_a^b corr(s) ds`` for a scalar callable."""
    if a == b:
        return 0.0
    val, _ = quad(corr, a, b, epsabs=tol, limit=200)
    return val
