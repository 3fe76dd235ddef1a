"""Flat, backend-agnostic description of one coupled-simulation setup.

Both kernel backends (compiled and pure Python) consume this structure.
It carries the queue rates, the environment in a primitive form (either a
finite-state jump chain given by exit rates plus cumulative embedded
transition rows, or an exactly sampled mean-reverting Gaussian process),
and the perturbation as either a per-state table or a clipped affine map.

``m_dom`` is the bound used to dominate the added-departure process: extra
departure candidates arrive at rate ``eps * m_dom`` and are accepted with
probability ``p_plus(x) / m_dom``, which is an exact thinning whenever
``m_dom >= sup p_plus``.  ``pm_max`` plays the same role for cancellation
coins: when it is zero no cancellation randomness is consumed at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENV_CTMC = 0
ENV_OU = 1

X0_STATIONARY = 0
X0_FIXED = 1


@dataclass
class SimPlan:
    lam: float
    mu: float
    eps: float
    env_kind: int
    # finite-chain environment (ignored for the OU kind)
    exit_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trans_cum: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    nu_cum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_plus_tab: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_minus_tab: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # OU environment (ignored for the chain kind)
    theta: float = 0.0
    ou_mean: float = 0.0
    ou_sd: float = 0.0
    # p(x) = clip(p_a + p_b * x, p_lo, p_hi) for the OU kind
    p_a: float = 0.0
    p_b: float = 0.0
    p_lo: float = 0.0
    p_hi: float = 0.0
    # derived bounds
    m_dom: float = 0.0
    pm_max: float = 0.0
    # initial environment state
    x0_mode: int = X0_STATIONARY
    x0_fixed: float = 0.0

    def __post_init__(self) -> None:
        self.exit_rates = np.ascontiguousarray(self.exit_rates, dtype=np.float64)
        self.trans_cum = np.ascontiguousarray(self.trans_cum, dtype=np.float64)
        self.nu_cum = np.ascontiguousarray(self.nu_cum, dtype=np.float64)
        self.p_plus_tab = np.ascontiguousarray(self.p_plus_tab, dtype=np.float64)
        self.p_minus_tab = np.ascontiguousarray(self.p_minus_tab, dtype=np.float64)

    @property
    def add_rate(self) -> float:
        """Rate of the dominating candidate process for added departures."""
        return self.eps * self.m_dom

    @property
    def cancel_active(self) -> bool:
        return self.eps * self.pm_max > 0.0


# replica status codes shared by every batch kernel
STATUS_OK = 0
STATUS_CAP = 1
STATUS_TIE = 2

# event classification of one coupled busy-period replica
CLASS_NONE = 0
CLASS_ADDED_ONLY = 1
CLASS_CANCELED_ONLY = 2
CLASS_CANCELED_THEN_ADDED = 3
CLASS_OTHER = 4
