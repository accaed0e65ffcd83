from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_threads() -> int:
    return os.cpu_count() or 1


def pmap(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> list[R]:
    """Ordered map over a thread pool; results come back in input order, so
    reductions over them are reproducible for any thread count."""
    items = list(items)
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
