"""Empirical extraction of the gap-series coefficients from an eps sweep.

For each ``eps`` on a grid, the coupled simulator yields per-replica
differences ``B - B_eps`` (common random numbers, so the O(1) busy-period
noise cancels and only the O(eps) coupling noise remains).  The point
means are then fitted by weighted least squares to the zero-intercept
model ``gap(eps) = d1*eps + d2*eps^2`` — the coupling forces
``gap(0) = 0`` exactly, so no constant term belongs in the design.  The
analytic fit covariance ``(X' W X)^-1`` is cross-checked by a replica
bootstrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .analytic import DEFAULT_EVENT_CAP
from .coupled import build_plan
from .environment import EnvironmentModel
from .errors import StabilityError
from .kernels import STATUS_OK
from .params import QueueParams
from .perturbation import PerturbationSpec, validate
from .runner import DEFAULT_CHUNK, as_seedseq, run_chunked

MIN_REPLICAS_PER_POINT = 10_000


@dataclass
class SweepResult:
    """Gap estimates over an eps grid and the fitted series coefficients."""

    eps_grid: np.ndarray
    gap_means: np.ndarray
    gap_stderrs: np.ndarray
    d1_hat: float
    d1_se: float
    d2_hat: float
    d2_se: float
    cov: np.ndarray
    bootstrap_d1_se: float
    bootstrap_d2_se: float
    residuals: np.ndarray
    n_replicas_per_point: int
    n_aborted: int
    seed: object = field(repr=False, default=None)

    @property
    def fitted(self) -> np.ndarray:
        return self.d1_hat * self.eps_grid + self.d2_hat * self.eps_grid**2

    @property
    def max_resid_over_eps3(self) -> float:
        """Residual scale against eps^3: stays bounded when the grid is
        small enough that the cubic term hides below the fit error."""
        return float(np.max(np.abs(self.residuals) / self.eps_grid**3))

    def table_rows(self) -> list[dict]:
        rows = []
        for i, e in enumerate(self.eps_grid):
            rows.append(
                {
                    "eps": float(e),
                    "gap_mean": float(self.gap_means[i]),
                    "gap_stderr": float(self.gap_stderrs[i]),
                    "fitted": float(self.fitted[i]),
                }
            )
        return rows


def _wls_fit(eps: np.ndarray, y: np.ndarray, se: np.ndarray):
    if np.all(se == 0):
        if np.all(y == 0):  # identically zero perturbation: exact zero fit
            return np.zeros(2), np.zeros((2, 2))
        raise ValueError("zero-variance sweep points with nonzero gaps")
    # a zero-variance point (possible only in degenerate corners) acts as a
    # near-exact constraint rather than dividing by zero
    floor = se[se > 0].min() * 1e-6
    w = 1.0 / np.maximum(se, floor) ** 2
    x = np.column_stack([eps, eps**2])
    xtwx = x.T @ (w[:, None] * x)
    xtwy = x.T @ (w * y)
    cov = np.linalg.inv(xtwx)
    beta = cov @ xtwy
    return beta, cov


def run_sweep(
    params: QueueParams,
    env: EnvironmentModel,
    spec: PerturbationSpec,
    eps_grid,
    n_replicas_per_point: int,
    seed,
    chunk_size: int = DEFAULT_CHUNK,
    n_workers: int = 1,
    bootstrap_resamples: int = 200,
    event_cap: int = DEFAULT_EVENT_CAP,
) -> SweepResult:
    """Sweep the coupled gap over ``eps_grid`` and fit the quadratic model.

    Deterministic for fixed ``(seed, chunk_size)``; every grid point must
    satisfy the admissibility checks, the grid must be strictly increasing
    with at least two points (otherwise the design is singular), and at
    least 10^4 replicas per point are required for the fit error to mean
    anything.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    if len(eps_grid) < 2 or np.unique(eps_grid).size < 2:
        raise ValueError("eps grid needs at least two distinct points")
    if np.any(np.diff(eps_grid) <= 0):
        raise ValueError("eps grid must be strictly increasing")
    if np.any(eps_grid <= 0):
        raise ValueError("eps grid must be positive (gap(0) = 0 is built in)")
    if n_replicas_per_point < MIN_REPLICAS_PER_POINT:
        raise ValueError(f"need at least {MIN_REPLICAS_PER_POINT} replicas per point")
    for e in eps_grid:
        validate(spec, params.with_eps(float(e)))

    root = as_seedseq(seed)
    point_seeds = root.spawn(len(eps_grid) + 1)
    boot_seed = point_seeds[-1]

    diffs: list[np.ndarray] = []
    n_aborted = 0
    for e, pseed in zip(eps_grid, point_seeds):
        plan = build_plan(params.with_eps(float(e)), env, spec, x0=None)

        def task(bitgen, n, plan=plan):
            out = kernels.coupled_batch(bitgen, plan, n, event_cap)
            ok = out["status"] == STATUS_OK
            return out["b_std"][ok] - out["b_pert"][ok], int((~ok).sum())

        chunks = run_chunked(task, n_replicas_per_point, pseed, chunk_size, n_workers)
        diffs.append(np.concatenate([c[0] for c in chunks]))
        n_aborted += sum(c[1] for c in chunks)

    means = np.asarray([d.mean() for d in diffs])
    ses = np.asarray([d.std(ddof=1) / math.sqrt(len(d)) for d in diffs])
    beta, cov = _wls_fit(eps_grid, means, ses)

    # replica bootstrap of the whole pipeline confirms the analytic cov
    bgen = np.random.Generator(np.random.PCG64(boot_seed))
    boot = np.empty((bootstrap_resamples, 2))
    for b in range(bootstrap_resamples):
        bmeans = np.empty(len(eps_grid))
        for i, d in enumerate(diffs):
            idx = bgen.integers(0, len(d), size=len(d))
            bmeans[i] = d[idx].mean()
        boot[b], _ = _wls_fit(eps_grid, bmeans, ses)
    boot_se = boot.std(axis=0, ddof=1)

    return SweepResult(
        eps_grid=eps_grid,
        gap_means=means,
        gap_stderrs=ses,
        d1_hat=float(beta[0]),
        d1_se=float(math.sqrt(cov[0, 0])),
        d2_hat=float(beta[1]),
        d2_se=float(math.sqrt(cov[1, 1])),
        cov=cov,
        bootstrap_d1_se=float(boot_se[0]),
        bootstrap_d2_se=float(boot_se[1]),
        residuals=means - beta[0] * eps_grid - beta[1] * eps_grid**2,
        n_replicas_per_point=n_replicas_per_point,
        n_aborted=n_aborted,
        seed=seed,
    )


def rsr_reference(params: QueueParams, spec: PerturbationSpec, eps: float) -> float:
    """Mean busy period of the reduced-service-rate queue, the M/M/1 with
    the perturbation replaced by its stationary mean:
    ``1 / (mu + eps E[p] - lam)``."""
    rate = params.mu + eps * spec.mean_p
    if rate <= params.lam:
        raise StabilityError(
            f"reduced rate mu + eps*E[p] = {rate} <= lam = {params.lam}"
        )
    return 1.0 / (rate - params.lam)
