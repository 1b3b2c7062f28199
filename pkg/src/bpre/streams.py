"""Counter-based random streams and deterministic block fan-out.

Every block of paths owns a Philox stream keyed by ``(seed, block_index)``.
Blocks have a fixed size, so the set of draws does not depend on how many
workers execute them; partial results are always reduced in block order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

DEFAULT_BLOCK = 50_000


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for block ``index`` of run ``seed``."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def block_sizes(n: int, block: int = DEFAULT_BLOCK) -> list[int]:
    if n <= 0:
        return []
    full, rest = divmod(n, block)
    return [block] * full + ([rest] if rest else [])


def resolve_workers(workers: int | None) -> int:
    env = os.environ.get("BPRE_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, int(workers or 1))


def run_blocks(fn, n: int, seed: int, workers: int = 1, block: int = DEFAULT_BLOCK, salt: int = 0):
    """Call ``fn(size, rng)`` for every block and return the results in block order.

    ``salt`` separates independent estimators sharing one seed; it is folded
    into the high bits of the block index.
    """
    sizes = block_sizes(n, block)
    jobs = [(fn, s, seed, (salt << 32) | i) for i, s in enumerate(sizes)]
    workers = resolve_workers(workers)
    if workers == 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))


def _run_one(job):
    fn, size, seed, index = job
    return fn(size, stream(seed, index))
