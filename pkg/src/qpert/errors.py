"""Exception types raised by validation and simulation routines."""


class QpertError(Exception):
    """Base class for all package-specific errors."""


class StabilityError(QpertError):
    """The queue (or its worst-case bound) is not stable."""


class BoundednessError(QpertError):
    """The perturbation function is not bounded on the relevant support."""


class PerturbationSizeError(QpertError):
    """The perturbation magnitude is too large for the service rate."""


class ConfigError(QpertError):
    """An experiment configuration file is malformed or inconsistent."""


class ModelError(QpertError):
    """Structurally valid config describes an invalid model (e.g. a
    generator whose rows do not sum to zero)."""


class SimulationAbort(QpertError):
    """Too many replicas hit the per-replica event cap."""
