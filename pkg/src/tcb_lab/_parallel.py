"""Deterministic ordered parallel map.

Work items carry their own seeds, and results are reduced in input order,
so the output is identical for any thread count (including 1).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_ENV_VAR = "TCB_LAB_THREADS"
_thread_cap: int | None = None


def set_thread_cap(n: int | None) -> None:
    global _thread_cap
    _thread_cap = None if n is None else max(1, int(n))


def resolve_threads() -> int:
    if _thread_cap is not None:
        return _thread_cap
    env = os.environ.get(_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return min(os.cpu_count() or 1, 8)


def ordered_map(fn, items, threads: int | None = None) -> list:
    """Apply fn to each item, returning results in input order."""
    work = list(items)
    n = resolve_threads() if threads is None else max(1, int(threads))
    if n <= 1 or len(work) <= 1:
        return [fn(item) for item in work]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, work))
