"""Process-level runtime knobs."""

from __future__ import annotations

import os

__all__ = ["thread_count", "map_indexed"]

_ENV_VAR = "BEN_THREADS"


def thread_count() -> int:
    """Parallelism cap from the ``BEN_THREADS`` environment variable.

    Unset, empty, or invalid values mean 1 (serial).
    """
    raw = os.environ.get(_ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def map_indexed(fn, count: int):
    """Evaluate ``fn(i)`` for ``i in range(count)``, results in index order.

    Uses a thread pool of :func:`thread_count` workers when that exceeds 1;
    the returned list is ordered by index either way, so reductions over it
    are deterministic regardless of the worker count.
    """
    workers = thread_count()
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=min(workers, count)) as pool:
        return list(pool.map(fn, range(count)))
