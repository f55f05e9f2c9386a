"""Ordered work-queue execution: results come back in submission order."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Optional


def default_workers() -> int:
    return os.cpu_count() or 1


def ordered_map(func: Callable, items: Iterable, workers: Optional[int] = None) -> list:
    """``[func(x) for x in items]``, fanned out over ``workers`` processes.

    ``func`` and the items must be picklable. Output order (and therefore
    every downstream artifact) is independent of the worker count.
    """
    items = list(items)
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))
