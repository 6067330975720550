"""Ordered map over independent tasks, serial or on a process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def _init_worker():
    # one BLAS thread per process so workers do not oversubscribe cores
    from threadpoolctl import threadpool_limits
    threadpool_limits(1)


def resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return max(1, os.cpu_count() or 1)
    return int(workers)


def ordered_map(func, tasks, workers: int | None = 1, chunksize: int = 1) -> list:
    """``[func(t) for t in tasks]``, possibly computed in parallel.

    Results always come back in task order, so any reduction over them is
    independent of scheduling.
    """
    tasks = list(tasks)
    n = resolve_workers(workers)
    if n == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(n, len(tasks)), initializer=_init_worker) as pool:
        return list(pool.map(func, tasks, chunksize=chunksize))
