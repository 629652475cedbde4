"""
Bounded worker pool whose results never depend on scheduling.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int]) -> int:
    """Worker count for a ``--threads`` value; None or 0 means every core"""
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = 1) -> List[R]:
    """
    Apply ``fn`` to every item and return results in input order.

    Work items must not share mutable state; the output is identical for
    any thread count.
    """
    items = list(items)
    workers = min(resolve_threads(threads), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="freqpcqa") as pool:
        return list(pool.map(fn, items))
