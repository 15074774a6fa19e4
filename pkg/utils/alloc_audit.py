"""稠密配置稽核鉤子

管線在每個建立稠密陣列的位置呼叫 record()；只有在 audit_allocations()
區塊內才會實際記錄，平常呼叫幾乎沒有成本。測試以此確認沒有任何
兩個維度都隨 n 成長的稠密結構。
"""
from __future__ import annotations

import threading
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_lock = threading.Lock()
_active: list["AllocationLog"] = []


@dataclass
class AllocationLog:
    """一次稽核期間記錄的 (標籤, shape) 清單。"""

    records: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def violations(self, limit: int) -> list[tuple[str, tuple[int, ...]]]:
        """回傳至少兩個維度都超過 limit 的紀錄。"""
        bad = []
        for label, shape in self.records:
            if sum(1 for d in shape if d > limit) >= 2:
                bad.append((label, shape))
        return bad

    def largest(self) -> tuple[str, tuple[int, ...]] | None:
        if not self.records:
            return None
        return max(self.records, key=lambda r: int(np.prod(r[1])))


def record(label: str, array: np.ndarray) -> np.ndarray:
    """記錄稠密陣列的 shape 並原樣回傳，方便串接。"""
    if _active and isinstance(array, np.ndarray):
        with _lock:
            for log in _active:
                log.records.append((label, tuple(array.shape)))
    return array


@contextmanager
def audit_allocations() -> Iterator[AllocationLog]:
    log = AllocationLog()
    with _lock:
        _active.append(log)
    try:
        yield log
    finally:
        with _lock:
            _active.remove(log)
