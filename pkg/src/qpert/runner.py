"""Deterministic chunked execution of batch kernels.

Replicas are split into fixed-size chunks; chunk ``k`` always draws from
the ``k``-th spawned child of ``SeedSequence(seed)`` and results are
reduced in chunk order, so the output is a pure function of
``(seed, total, chunk_size)`` — the worker count only changes scheduling.
Worker threads are effective because the compiled kernels release the GIL;
under the pure-Python backend they merely interleave, which is still
correct.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

from numpy.random import PCG64, SeedSequence

T = TypeVar("T")

DEFAULT_CHUNK = 1 << 16


def as_seedseq(seed) -> SeedSequence:
    return seed if isinstance(seed, SeedSequence) else SeedSequence(seed)


def spawn_bitgens(seed, n: int) -> list[PCG64]:
    """``n`` independent deterministic streams derived from ``seed``."""
    return [PCG64(ss) for ss in as_seedseq(seed).spawn(n)]


def chunk_sizes(total: int, chunk: int) -> list[int]:
    if total <= 0:
        raise ValueError("total must be positive")
    if chunk <= 0:
        raise ValueError("chunk must be positive")
    full, rem = divmod(total, chunk)
    return [chunk] * full + ([rem] if rem else [])


def run_chunked(
    task: Callable[[PCG64, int], T],
    total: int,
    seed,
    chunk_size: int = DEFAULT_CHUNK,
    n_workers: int = 1,
) -> list[T]:
    """Run ``task(bitgen, n)`` over chunks of ``total`` replicas.

    Returns per-chunk results ordered by chunk index.  ``task`` must do
    any per-chunk reduction itself if the full arrays are too large to
    keep.
    """
    sizes = chunk_sizes(total, chunk_size)
    bitgens = spawn_bitgens(seed, len(sizes))
    if n_workers <= 1 or len(sizes) == 1:
        return [task(bg, n) for bg, n in zip(bitgens, sizes)]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(task, bg, n) for bg, n in zip(bitgens, sizes)]
        return [f.result() for f in futures]
