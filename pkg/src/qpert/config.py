"""Experiment configuration files.

Experiments are described by a single TOML file (human-readable, diffable,
decimal numbers with exponent notation) naming the queue, the environment,
the perturbation, the experiment kind and its sampling budget.  Loading
validates everything up front — admissibility of the perturbation included
— so a run either starts clean or exits with a configuration/validation
error and no output files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .environment import Affine, EnvironmentModel, FiniteCtmcEnvironment, OuEnvironment
from .errors import ConfigError, ModelError, QpertError
from .params import QueueParams
from .perturbation import ClippedAffine, PerturbationSpec, validate

EXPERIMENTS = (
    "moments_check",
    "first_order",
    "second_order",
    "rsr_gap",
    "fast_env",
    "sweep",
)

DEFAULT_EPS_GRID = (0.01, 0.02, 0.04, 0.06, 0.08, 0.10)
DEFAULT_ALPHAS = (1.0, 4.0, 16.0, 64.0)

#: environment variable overriding the output directory
OUTPUT_DIR_ENV = "QPERT_OUTPUT_DIR"


@dataclass
class ExperimentConfig:
    params: QueueParams
    env: EnvironmentModel
    spec: PerturbationSpec
    experiment: str
    eps: float
    eps_grid: tuple[float, ...]
    alphas: tuple[float, ...]
    n_replicas: int
    coeff_replicas: int
    seed: int
    output_dir: Path
    workers: int
    chunk_size: int
    event_log: bool
    raw: dict = field(repr=False, default_factory=dict)


def _require(table: dict, key: str, kind, where: str):
    if key not in table:
        raise ConfigError(f"missing '{key}' in [{where}]")
    val = table[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(f"'{key}' in [{where}] must be {kind.__name__}")
    return val


def _build_environment(table: dict) -> EnvironmentModel:
    kind = _require(table, "kind", str, "environment")
    if kind == "ctmc":
        gen = _require(table, "generator", list, "environment")
        try:
            return FiniteCtmcEnvironment(gen)
        except (ValueError, QpertError) as exc:
            raise ModelError(f"bad generator matrix: {exc}") from exc
    if kind == "ou":
        try:
            return OuEnvironment(
                theta=_require(table, "theta", float, "environment"),
                mean=_require(table, "mean", float, "environment"),
                variance=_require(table, "variance", float, "environment"),
            )
        except ValueError as exc:
            raise ModelError(f"bad ou parameters: {exc}") from exc
    raise ConfigError(f"unknown environment kind {kind!r}")


def _build_perturbation(table: dict, env: EnvironmentModel) -> PerturbationSpec:
    try:
        if isinstance(env, FiniteCtmcEnvironment):
            values = _require(table, "values", list, "perturbation")
            return PerturbationSpec(env, values)
        a = _require(table, "a", float, "perturbation")
        b = _require(table, "b", float, "perturbation")
        if "clip" in table:
            clip = table["clip"]
            if not (isinstance(clip, list) and len(clip) == 2):
                raise ConfigError("'clip' must be a [lo, hi] pair")
            p = ClippedAffine(a, b, float(clip[0]), float(clip[1]))
        else:
            p = Affine(a, b)
        return PerturbationSpec(
            env, p, allow_unbounded=bool(table.get("allow_unbounded", False))
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, QpertError) as exc:
        raise ModelError(f"bad perturbation: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and fully validate an experiment file.

    Raises :class:`ConfigError` for structural problems and lets the
    admissibility errors (boundedness, perturbation size, stability)
    propagate as their own types so the CLI can distinguish exit codes.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    for section in ("queue", "environment", "perturbation", "experiment"):
        if section not in raw or not isinstance(raw[section], dict):
            raise ConfigError(f"missing [{section}] section")

    q = raw["queue"]
    exp = raw["experiment"]
    experiment = _require(exp, "kind", str, "experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}"
        )
    eps = float(exp.get("eps", 0.05))
    try:
        params = QueueParams(
            lam=_require(q, "lam", float, "queue"),
            mu=_require(q, "mu", float, "queue"),
            eps=eps,
        )
    except ValueError as exc:
        raise ConfigError(f"bad queue parameters: {exc}") from exc

    env = _build_environment(raw["environment"])
    spec = _build_perturbation(raw["perturbation"], env)

    eps_grid = tuple(float(e) for e in exp.get("eps_grid", DEFAULT_EPS_GRID))
    alphas = tuple(float(a) for a in exp.get("alphas", DEFAULT_ALPHAS))
    n_replicas = int(exp.get("n_replicas", 100_000))
    coeff_replicas = int(exp.get("coeff_replicas", 100_000))
    seed = exp.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("experiment.seed must be an integer (reproducibility)")

    out_table = raw.get("output", {})
    run_table = raw.get("run", {})
    out_dir = os.environ.get(OUTPUT_DIR_ENV) or out_table.get("dir", "results")
    workers = int(run_table.get("workers", 0))
    if workers <= 0:
        workers = os.cpu_count() or 1
    chunk_size = int(run_table.get("chunk_size", 1 << 16))
    if chunk_size <= 0:
        raise ConfigError("run.chunk_size must be positive")

    # admissibility at the largest eps this experiment will touch
    probe = max([eps, *eps_grid]) if experiment in ("first_order", "second_order", "sweep") else eps
    validate(spec, params.with_eps(probe))

    return ExperimentConfig(
        params=params,
        env=env,
        spec=spec,
        experiment=experiment,
        eps=eps,
        eps_grid=eps_grid,
        alphas=alphas,
        n_replicas=n_replicas,
        coeff_replicas=coeff_replicas,
        seed=seed,
        output_dir=Path(out_dir),
        workers=workers,
        chunk_size=chunk_size,
        event_log=bool(out_table.get("event_log", False)),
        raw=raw,
    )
