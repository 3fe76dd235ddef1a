"""Experiment drivers: config in, result rows and output files out.

Every experiment produces rows ``(name, value, std_error, n_replicas,
method)`` written to ``results.csv`` (schema-versioned header, body a pure
function of config + seed) and a ``manifest.json`` echoing the config with
run metadata (wall time stays out of the CSV so reruns diff clean).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import coefficients as coeff
from . import kernels
from .analytic import DEFAULT_EVENT_CAP, busy_moments
from .config import ExperimentConfig
from .coupled import estimate_mean_gap, write_event_log
from .kernels import STATUS_OK
from .runner import as_seedseq, run_chunked
from .sweep import run_sweep, rsr_reference

CSV_SCHEMA = "qpert-results-1"

CLOSED = "closed_form"
SEMI = "semi_analytic_mc"
SIM = "simulation"


@dataclass
class ResultRow:
    name: str
    value: float
    std_error: float
    n_replicas: int
    method: str


@dataclass
class RunOutput:
    rows: list[ResultRow]
    files: dict[str, Path]
    meta: dict


def _row_from_estimate(name: str, est: coeff.CoefficientEstimate) -> ResultRow:
    return ResultRow(name, est.value, est.std_error, est.n_replicas, est.method)


def _experiment_moments_check(cfg: ExperimentConfig) -> RunOutput:
    lam, mu = cfg.params.lam, cfg.params.mu

    def task(bitgen, n):
        length, nserv, depsum, st = kernels.busy_batch(bitgen, lam, mu, n, DEFAULT_EVENT_CAP)
        ok = st == STATUS_OK
        b = length[ok]
        k = nserv[ok].astype(float)
        d = depsum[ok]
        cols = np.column_stack([b, b * b, k, k * b, k * (k - 1.0), d])
        return int(ok.sum()), cols.sum(axis=0), (cols * cols).sum(axis=0)

    chunks = run_chunked(task, cfg.n_replicas, cfg.seed, cfg.chunk_size, cfg.workers)
    n = sum(c[0] for c in chunks)
    s1 = np.sum([c[1] for c in chunks], axis=0)
    s2 = np.sum([c[2] for c in chunks], axis=0)
    mean = s1 / n
    var = np.maximum(0.0, (s2 - s1 * s1 / n) / (n - 1))
    se = np.sqrt(var / n)
    names = ("E_B", "E_B2", "E_N", "E_NB", "E_NN1", "E_D")
    rows = [ResultRow(nm, float(m), float(s), n, SIM) for nm, m, s in zip(names, mean, se)]
    exact = busy_moments(cfg.params)
    for nm in names:
        rows.append(ResultRow(nm + "_exact", getattr(exact, nm), 0.0, 0, CLOSED))
    return RunOutput(rows=rows, files={}, meta={"aborted": cfg.n_replicas - n})


def _sweep_rows(cfg: ExperimentConfig, seed) -> tuple[list[ResultRow], object]:
    res = run_sweep(
        cfg.params,
        cfg.env,
        cfg.spec,
        cfg.eps_grid,
        cfg.n_replicas,
        seed,
        chunk_size=cfg.chunk_size,
        n_workers=cfg.workers,
    )
    n = res.n_replicas_per_point
    rows = [
        ResultRow("d1_hat", res.d1_hat, res.d1_se, n, SIM),
        ResultRow("d2_hat", res.d2_hat, res.d2_se, n, SIM),
    ]
    return rows, res


def _experiment_first_order(cfg: ExperimentConfig) -> RunOutput:
    rows = [_row_from_estimate("d1", coeff.first_order_coeff(cfg.params, cfg.spec))]
    sweep_rows, res = _sweep_rows(cfg, cfg.seed)
    rows.append(sweep_rows[0])
    return RunOutput(rows=rows, files={}, meta={"sweep": res.table_rows(), "aborted": res.n_aborted})


def _experiment_second_order(cfg: ExperimentConfig) -> RunOutput:
    root = as_seedseq(cfg.seed)
    added_seed, canceled_seed, sweep_seed = root.spawn(3)
    added = coeff.added_second_order(
        cfg.params, cfg.env, cfg.spec, cfg.coeff_replicas, added_seed
    )
    canceled = coeff.canceled_second_order(
        cfg.params, cfg.env, cfg.spec, cfg.coeff_replicas, canceled_seed
    )
    rows = [
        _row_from_estimate("d1", coeff.first_order_coeff(cfg.params, cfg.spec)),
        _row_from_estimate("added_second_order", added),
        _row_from_estimate("canceled_second_order", canceled),
        _row_from_estimate("d2", added - canceled),
    ]
    sweep_rows, res = _sweep_rows(cfg, sweep_seed)
    rows.extend(sweep_rows)
    return RunOutput(rows=rows, files={}, meta={"sweep": res.table_rows(), "aborted": res.n_aborted})


def _single_exponential_covariance(cfg: ExperimentConfig):
    """(alpha, var) when the perturbation autocovariance is one decaying
    mode, else None."""
    p_repr = cfg.spec.table if cfg.spec.table is not None else cfg.spec.p
    cov = cfg.env.covariance_structure(p_repr)
    decaying = [
        (g.real, c.real)
        for c, g in zip(cov.coef, cov.rate)
        if abs(g) > 0 and abs(c) > 1e-12
    ]
    if len(decaying) == 1 and abs(cov.constant_term) < 1e-10:
        return decaying[0]
    return None


def _experiment_rsr_gap(cfg: ExperimentConfig) -> RunOutput:
    root = as_seedseq(cfg.seed)
    semi_seed, sim_seed = root.spawn(2)
    eps = cfg.eps
    rows = []
    side = "nonneg" if cfg.spec.sup_p_minus == 0 else (
        "nonpos" if cfg.spec.sup_p_plus == 0 else None
    )
    if side is None:
        raise coeff.QpertError(
            "rsr_gap experiment needs a one-signed perturbation"
        )
    semi = coeff.rsr_second_order_gap(
        cfg.params, cfg.env, cfg.spec, side, cfg.coeff_replicas, semi_seed
    )
    rows.append(_row_from_estimate("rsr_gap_semi_analytic", semi))
    single = _single_exponential_covariance(cfg)
    if single is not None:
        alpha, var = single
        rows.append(
            _row_from_estimate(
                "rsr_gap_closed_form", coeff.rsr_gap_exponential(alpha, var, cfg.params)
            )
        )
    # simulated (E(B_hat) - E(B_eps)) / eps^2 via the coupled gap:
    # E(B_hat) - E(B) is closed form, the rest is the CRN gap estimate
    gap = estimate_mean_gap(
        cfg.params.with_eps(eps),
        cfg.env,
        cfg.spec,
        cfg.n_replicas,
        sim_seed,
        chunk_size=cfg.chunk_size,
        n_workers=cfg.workers,
    )
    closed_part = rsr_reference(cfg.params, cfg.spec, eps) - busy_moments(cfg.params).E_B
    value = (closed_part + gap.value) / eps**2
    rows.append(ResultRow("rsr_gap_simulated", value, gap.std_error / eps**2, gap.n_replicas, SIM))
    rows.append(ResultRow("rsr_reference_mean", rsr_reference(cfg.params, cfg.spec, eps), 0.0, 0, CLOSED))
    return RunOutput(rows=rows, files={}, meta={"eps": eps, "aborted": gap.n_aborted})


def _experiment_fast_env(cfg: ExperimentConfig) -> RunOutput:
    pts = coeff.fast_env_sweep(
        cfg.params, cfg.env, cfg.spec, cfg.alphas, cfg.coeff_replicas, cfg.seed
    )
    rows = [
        _row_from_estimate(f"d2_increase_alpha_{pt.alpha:g}", pt.estimate) for pt in pts
    ]
    rows.append(_row_from_estimate("fast_env_limit", coeff.fast_env_limit(cfg.params, cfg.spec)))
    return RunOutput(rows=rows, files={}, meta={"alphas": list(cfg.alphas)})


def _experiment_sweep(cfg: ExperimentConfig) -> RunOutput:
    rows, res = _sweep_rows(cfg, cfg.seed)
    return RunOutput(rows=rows, files={}, meta={"sweep": res.table_rows(), "aborted": res.n_aborted})


_DRIVERS = {
    "moments_check": _experiment_moments_check,
    "first_order": _experiment_first_order,
    "second_order": _experiment_second_order,
    "rsr_gap": _experiment_rsr_gap,
    "fast_env": _experiment_fast_env,
    "sweep": _experiment_sweep,
}


def _format(x: float) -> str:
    return repr(float(x))


def write_results_csv(path: Path, rows: list[ResultRow]) -> None:
    lines = ["schema,name,value,std_error,n_replicas,method"]
    for r in rows:
        lines.append(
            f"{CSV_SCHEMA},{r.name},{_format(r.value)},{_format(r.std_error)},"
            f"{r.n_replicas},{r.method}"
        )
    path.write_text("\n".join(lines) + "\n")


def write_sweep_csv(path: Path, table: list[dict]) -> None:
    lines = ["schema,eps,gap_mean,gap_stderr,fitted"]
    for row in table:
        lines.append(
            f"{CSV_SCHEMA},{_format(row['eps'])},{_format(row['gap_mean'])},"
            f"{_format(row['gap_stderr'])},{_format(row['fitted'])}"
        )
    path.write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured experiment; returns the manifest dict."""
    t0 = time.time()
    out = _DRIVERS[cfg.experiment](cfg)
    wall = time.time() - t0

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    results_path = cfg.output_dir / "results.csv"
    write_results_csv(results_path, out.rows)
    files = {"results": str(results_path)}

    if "sweep" in out.meta:
        sweep_path = cfg.output_dir / "sweep.csv"
        write_sweep_csv(sweep_path, out.meta["sweep"])
        files["sweep"] = str(sweep_path)

    if cfg.event_log:
        log_path = cfg.output_dir / "events.jsonl"
        from .coupled import build_plan

        plan = build_plan(cfg.params, cfg.env, cfg.spec)
        bitgen = np.random.PCG64(as_seedseq((cfg.seed, 0xE7)))
        result = kernels.coupled_batch(
            bitgen, plan, min(cfg.n_replicas, 100_000), DEFAULT_EVENT_CAP
        )
        write_event_log(log_path, result)
        files["event_log"] = str(log_path)

    manifest = {
        "schema": CSV_SCHEMA,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "chunk_size": cfg.chunk_size,
        "backend": kernels.BACKEND,
        "wall_time_s": wall,
        "n_replicas": cfg.n_replicas,
        "coeff_replicas": cfg.coeff_replicas,
        "aborted_replicas": out.meta.get("aborted", 0),
        "config": cfg.raw,
        "files": files,
    }
    manifest_path = cfg.output_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return manifest
