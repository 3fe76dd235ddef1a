"""The service-rate perturbation function and its validation.

The perturbed queue serves at ``mu + eps * p(X(t))``.  Everything
downstream needs (i) the split ``p = p_plus - p_minus`` into gained and
lost capacity, (ii) a finite bound on ``|p|`` so that extra departures can
be generated by exact thinning of a dominating Poisson process, and
(iii) the two admissibility checks: ``eps * sup|p| < mu`` and stability of
the worst-case service rate ``mu0 = mu - eps * sup(p_minus) > lam``.

For the finite-chain environment ``p`` is a per-state table (or callable
on state indices).  For the Gaussian environment ``p`` must be affine or
clipped affine: a clipped map is bounded and satisfies the boundedness
assumption exactly, while a raw affine map violates it on the tails and is
admitted only with ``allow_unbounded=True``, in which case the bound is
taken on the +-8 standard-deviation support and the (10^-15-probability)
tail excess is knowingly ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .environment import (
    Affine,
    ClippedAffine,
    EnvironmentModel,
    FiniteCtmcEnvironment,
    OuEnvironment,
)
from .errors import BoundednessError, PerturbationSizeError, StabilityError
from .params import QueueParams

__all__ = ["Affine", "ClippedAffine", "PerturbationSpec", "ValidationResult", "validate"]


def _positive_part(f):
    return lambda x: max(float(f(x)), 0.0)


def _negative_part(f):
    return lambda x: max(-float(f(x)), 0.0)


class PerturbationSpec:
    """Validated description of ``p`` against a given environment."""

    def __init__(self, env: EnvironmentModel, p, allow_unbounded: bool = False):
        self.env = env
        self.allow_unbounded = allow_unbounded
        if isinstance(env, FiniteCtmcEnvironment):
            n = env.n_states
            table = (
                np.asarray([float(p(i)) for i in range(n)])
                if callable(p)
                else np.asarray(p, dtype=float)
            )
            if table.shape != (n,):
                raise ValueError(f"p must have one value per state, got {table.shape}")
            if not np.all(np.isfinite(table)):
                raise BoundednessError("p takes non-finite values on the state space")
            self.table = table
            self.p = table
            self.p_plus = np.maximum(table, 0.0)
            self.p_minus = np.maximum(-table, 0.0)
            self.bound_M = float(np.abs(table).max())
            self.sup_p_plus = float(self.p_plus.max())
            self.sup_p_minus = float(self.p_minus.max())
            self.soft_bound = False
        elif isinstance(env, OuEnvironment):
            if isinstance(p, ClippedAffine):
                lo, hi = (p.lo, p.hi) if p.b != 0 else (float(p(0.0)),) * 2
                self.soft_bound = False
            elif isinstance(p, Affine):
                if p.b != 0 and not allow_unbounded:
                    raise BoundednessError(
                        "affine p is unbounded on the Gaussian environment; "
                        "clip it or pass allow_unbounded=True"
                    )
                # bound taken on the +-8 sd support
                ends = (env.mean - 8.0 * env.sd, env.mean + 8.0 * env.sd)
                lo, hi = sorted(float(p(x)) for x in ends)
                self.soft_bound = p.b != 0
            else:
                raise TypeError(
                    "Gaussian environments take Affine or ClippedAffine perturbations"
                )
            self.table = None
            self.p = p
            self.p_plus = _positive_part(p)
            self.p_minus = _negative_part(p)
            self.bound_M = max(abs(lo), abs(hi))
            self.sup_p_plus = max(0.0, hi)
            self.sup_p_minus = max(0.0, -lo)
        else:
            raise TypeError(f"unsupported environment type {type(env).__name__}")

        self.mean_p = env.stationary_expectation(self.p)
        self.mean_p_plus = env.stationary_expectation(self.p_plus)
        self.mean_p_minus = env.stationary_expectation(self.p_minus)
        second = env.stationary_expectation(_square(self.p))
        self.var_p = max(0.0, second - self.mean_p**2)


def _square(f):
    if callable(f):
        return lambda x: float(f(x)) ** 2
    return np.asarray(f) ** 2


@dataclass(frozen=True)
class ValidationResult:
    """Worst-case service rate and the busy-period growth constant."""

    mu0: float
    K: float


def validate(spec: PerturbationSpec, params: QueueParams) -> ValidationResult:
    """Check the admissibility assumptions for ``(spec, params)``.

    Raises :class:`BoundednessError` if ``|p|`` has no usable bound,
    :class:`PerturbationSizeError` if ``eps * sup|p| >= mu`` and
    :class:`StabilityError` if the slowest service rate
    ``mu0 = mu - eps * sup(p_minus)`` does not exceed ``lam``.  On success
    returns ``mu0`` and ``K = 1/(mu0 - lam)``, the per-customer bound on
    the mean perturbed busy period.
    """
    if not math.isfinite(spec.bound_M):
        raise BoundednessError("perturbation bound is not finite")
    if spec.soft_bound and not spec.allow_unbounded:
        raise BoundednessError("unbounded perturbation without allow_unbounded")
    if params.eps * spec.bound_M >= params.mu:
        raise PerturbationSizeError(
            f"eps * sup|p| = {params.eps * spec.bound_M} >= mu = {params.mu}"
        )
    mu0 = params.mu - params.eps * spec.sup_p_minus
    if mu0 <= params.lam:
        raise StabilityError(
            f"worst-case service rate mu0 = {mu0} <= lam = {params.lam}"
        )
    return ValidationResult(mu0=mu0, K=1.0 / (mu0 - params.lam))
