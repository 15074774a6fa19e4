"""分塊平行工具函式

所有平行區段共用同一個 worker 數設定。結果一律依分塊順序歸約，
因此 workers=1 時的輸出與序列執行完全相同。
"""
from __future__ import annotations

import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


def chunk_bounds(n_items: int, n_chunks: int) -> list[tuple[int, int]]:
    """將 [0, n_items) 切成至多 n_chunks 個連續區間。"""
    n_chunks = max(1, min(n_chunks, n_items))
    if n_items == 0:
        return []
    edges = [round(i * n_items / n_chunks) for i in range(n_chunks + 1)]
    return [(edges[i], edges[i + 1]) for i in range(n_chunks)]


def chunked_map(
    func: Callable[[int, int], T], n_items: int, workers: int = 1
) -> list[T]:
    """對每個區間 [start, stop) 呼叫 func，依區間順序回傳結果。

    numpy／scipy 的矩陣運算會釋放 GIL，因此使用執行緒池即可平行。
    """
    bounds = chunk_bounds(n_items, workers)
    if workers <= 1 or len(bounds) <= 1:
        return [func(start, stop) for start, stop in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, start, stop) for start, stop in bounds]
        return [fut.result() for fut in futures]


def chunked_reduce(
    func: Callable[[int, int], T], n_items: int, workers: int = 1
) -> T:
    """各 worker 計算部分和，最後依區間順序加總一次。"""
    partials = chunked_map(func, n_items, workers)
    if not partials:
        raise ValueError("n_items 必須 >= 1")
    total = partials[0]
    for part in partials[1:]:
        total = total + part
    return total
