"""Simulation kernels with a compiled core and a pure-Python fallback.

On import the package prefers the compiled extension; if it is missing
(e.g. the build step was skipped) the pure-Python kernels take over with
identical semantics and identical random streams, just slower.  Set
``QPERT_BACKEND=python`` or ``QPERT_BACKEND=c`` to force a choice; forcing
``c`` raises if the extension is absent.

``benchmarks/bench_backends.py`` measures the gap between the two.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import pykernels
from .plan import (
    CLASS_ADDED_ONLY,
    CLASS_CANCELED_ONLY,
    CLASS_CANCELED_THEN_ADDED,
    CLASS_NONE,
    CLASS_OTHER,
    ENV_CTMC,
    ENV_OU,
    STATUS_CAP,
    STATUS_OK,
    STATUS_TIE,
    X0_FIXED,
    X0_STATIONARY,
    SimPlan,
)

_FORCED = os.environ.get("QPERT_BACKEND", "").strip().lower()

_ckernels: ModuleType | None
try:
    from . import _ckernels  # type: ignore[attr-defined]
except ImportError:
    _ckernels = None

if _FORCED and _FORCED not in ("python", "c"):
    raise ImportError(f"QPERT_BACKEND must be 'python' or 'c', got {_FORCED!r}")

if _FORCED == "python":
    _active = pykernels
    BACKEND = "python"
elif _FORCED == "c":
    if _ckernels is None:
        raise ImportError(
            "QPERT_BACKEND=c requested but the compiled extension is not built"
        )
    _active = _ckernels
    BACKEND = "c"
elif _ckernels is not None:
    _active = _ckernels
    BACKEND = "c"
else:
    _active = pykernels
    BACKEND = "python"


def available_backends() -> list[str]:
    return ["python"] + (["c"] if _ckernels is not None else [])


def get_backend(name: str | None = None) -> ModuleType:
    """Return a kernel module by name (``None`` for the active one)."""
    if name is None:
        return _active
    if name == "python":
        return pykernels
    if name == "c":
        if _ckernels is None:
            raise ValueError("compiled backend not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


busy_batch = _active.busy_batch
busy_departures_batch = _active.busy_departures_batch
decomposition_batch = _active.decomposition_batch
coupled_batch = _active.coupled_batch
pqueue_batch = _active.pqueue_batch
first_points_batch = _active.first_points_batch
env_functionals_batch = _active.env_functionals_batch

__all__ = [
    "BACKEND",
    "SimPlan",
    "ENV_CTMC",
    "ENV_OU",
    "X0_STATIONARY",
    "X0_FIXED",
    "STATUS_OK",
    "STATUS_CAP",
    "STATUS_TIE",
    "CLASS_NONE",
    "CLASS_ADDED_ONLY",
    "CLASS_CANCELED_ONLY",
    "CLASS_CANCELED_THEN_ADDED",
    "CLASS_OTHER",
    "available_backends",
    "get_backend",
    "busy_batch",
    "busy_departures_batch",
    "decomposition_batch",
    "coupled_batch",
    "pqueue_batch",
    "first_points_batch",
    "env_functionals_batch",
]
