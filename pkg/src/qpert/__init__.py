"""Busy-period analysis of an M/M/1 queue with a randomly modulated
service rate.

The package simulates a pair of coupled queues — the standard M/M/1 queue
and a perturbed one whose service rate is ``mu + eps * p(X(t))`` for a
stationary Markov environment ``X`` — and computes the first two
coefficients of the expansion of the mean busy-period gap
``E(B - B_eps) = d1*eps + d2*eps**2 + o(eps**2)`` both in closed /
semi-analytic form and from simulation sweeps.
"""

from .environment import Affine, ClippedAffine, FiniteCtmcEnvironment, OuEnvironment
from .kernels import BACKEND
from .params import QueueParams
from .perturbation import PerturbationSpec, validate

__version__ = "0.1.0"

__all__ = [
    "QueueParams",
    "FiniteCtmcEnvironment",
    "OuEnvironment",
    "Affine",
    "ClippedAffine",
    "PerturbationSpec",
    "validate",
    "BACKEND",
    "__version__",
]
