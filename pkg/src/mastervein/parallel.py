"""Deterministic fan-out helper.

Results are collected in input order, so any reduction downstream sees the
same sequence regardless of the worker count; the heavy lifting (FFTs,
matrix products) releases the GIL, which is what makes threads worthwhile.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def default_threads() -> int:
    """Thread cap from the MASTERVEIN_THREADS environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("MASTERVEIN_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
