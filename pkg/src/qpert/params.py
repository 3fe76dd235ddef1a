"""Queue parameters shared by the whole package."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import StabilityError


@dataclass(frozen=True)
class QueueParams:
    """Arrival rate, base service rate and perturbation magnitude.

    The base queue is M/M/1 with arrival rate ``lam`` and service rate
    ``mu``; the modulated queue serves at rate ``mu + eps * p(X(t))``.
    Stability of the base queue requires ``lam < mu``.
    """

    lam: float
    mu: float
    eps: float = 0.0

    def __post_init__(self) -> None:
        if self.lam <= 0 or self.mu <= 0:
            raise ValueError("rates must be positive")
        if self.lam >= self.mu:
            raise StabilityError(
                f"unstable queue: lam={self.lam} >= mu={self.mu}"
            )
        if self.eps < 0:
            raise ValueError("eps must be >= 0")

    @property
    def rho(self) -> float:
        """Utilisation lam/mu, always in (0, 1)."""
        return self.lam / self.mu

    def with_eps(self, eps: float) -> "QueueParams":
        return QueueParams(self.lam, self.mu, eps)
