"""Benchmark the compiled kernels against the pure-Python fallback.

Run as ``python benchmarks/bench_backends.py [n_replicas]``.  Both
backends draw the identical random streams, so each workload also doubles
as a live parity check on a sample of the output.
"""

import sys
import time

import numpy as np
from numpy.random import PCG64

from qpert.coupled import build_plan
from qpert.environment import FiniteCtmcEnvironment, OuEnvironment
from qpert.kernels import available_backends, get_backend
from qpert.params import QueueParams
from qpert.perturbation import ClippedAffine, PerturbationSpec

CAP = 10**7


def workloads(n):
    env = FiniteCtmcEnvironment([[-1.0, 1.0], [1.0, -1.0]])
    spec = PerturbationSpec(env, [-1.0, 1.0])
    plan = build_plan(QueueParams(1.0, 2.0, 0.1), env, spec)
    ou_env = OuEnvironment(theta=1.0, mean=0.0, variance=1.0)
    ou_spec = PerturbationSpec(ou_env, ClippedAffine(0.0, 1.0, -1.0, 1.0))
    ou_plan = build_plan(QueueParams(1.0, 2.0, 0.1), ou_env, ou_spec)
    return [
        ("busy_batch", lambda k, bg, m: k.busy_batch(bg, 1.0, 2.0, m, CAP), n),
        ("busy_departures", lambda k, bg, m: k.busy_departures_batch(bg, 1.0, 2.0, m, CAP), n),
        ("decomposition", lambda k, bg, m: k.decomposition_batch(bg, 1.0, 2.0, m, CAP), n),
        ("coupled (chain)", lambda k, bg, m: k.coupled_batch(bg, plan, m, CAP), n),
        ("coupled (ou)", lambda k, bg, m: k.coupled_batch(bg, ou_plan, m, CAP), n // 2),
        ("pqueue (chain)", lambda k, bg, m: k.pqueue_batch(bg, plan, 1, m, CAP), n),
    ]


def first_scalar(result):
    arr = result["b_std"] if isinstance(result, dict) else result[0]
    return float(np.asarray(arr)[0])


def main() -> int:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    names = available_backends()
    if "c" not in names:
        print("compiled backend not built; showing python only")
    print(f"{'workload':<18}", end="")
    for name in names:
        print(f"{name + ' (rep/s)':>16}", end="")
    if "c" in names:
        print(f"{'speedup':>10}", end="")
    print()
    for label, fn, m in workloads(n):
        rates = {}
        check = {}
        for name in names:
            kern = get_backend(name)
            m_eff = m if name == "c" else max(m // 40, 2000)
            t0 = time.perf_counter()
            out = fn(kern, PCG64(12345), m_eff)
            dt = time.perf_counter() - t0
            rates[name] = m_eff / dt
            check[name] = first_scalar(out)
        if len(names) == 2 and check["c"] != check["python"]:
            raise SystemExit(f"parity check failed for {label}")
        print(f"{label:<18}", end="")
        for name in names:
            print(f"{rates[name]:>16,.0f}", end="")
        if "c" in names and "python" in names:
            print(f"{rates['c'] / rates['python']:>9.1f}x", end="")
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
