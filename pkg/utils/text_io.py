"""文字檔格式讀寫工具函式

支援的格式：
- 稠密矩陣：首行 `rows cols`，之後每行一欄（column-major）
- 稀疏三元組：`row col weight`
- 單欄向量
- `key: value` 報告
- CSV 表格
"""
from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

from errors import FormatError, ParseError

logger = logging.getLogger(__name__)


# ====================================================================
# 稠密矩陣
# ====================================================================

def write_dense(path: str | Path, matrix: np.ndarray) -> None:
    """以 column-major 文字格式寫出稠密矩陣。

    首行為 `rows cols`，接著每一欄佔一行、以空白分隔。
    """
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    rows, cols = mat.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{rows} {cols}\n")
        for j in range(cols):
            f.write(" ".join(repr(float(v)) for v in mat[:, j]) + "\n")


def read_dense(path: str | Path) -> np.ndarray:
    """讀取 write_dense 寫出的稠密矩陣。

    Raises:
        ParseError: 數值無法解析
        FormatError: 欄數或每欄長度與檔頭不符
    """
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path} 為空檔")
    try:
        rows, cols = (int(tok) for tok in lines[0].split())
    except ValueError as e:
        raise ParseError(f"檔頭必須為 'rows cols': {lines[0]!r}", 1) from e
    body = lines[1:]
    if len(body) != cols:
        raise FormatError(f"{path} 檔頭宣告 {cols} 欄，實際 {len(body)} 欄")
    mat = np.empty((rows, cols), dtype=float)
    for j, line in enumerate(body):
        try:
            values = [float(tok) for tok in line.split()]
        except ValueError as e:
            raise ParseError(str(e), j + 2) from e
        if len(values) != rows:
            raise FormatError(
                f"{path} 第 {j + 2} 行應有 {rows} 個值，實際 {len(values)}"
            )
        mat[:, j] = values
    return mat


# ====================================================================
# 向量
# ====================================================================

def write_vector(path: str | Path, vector: np.ndarray) -> None:
    """每行一個值的單欄文字。"""
    with open(path, "w", encoding="utf-8") as f:
        for v in np.asarray(vector, dtype=float).ravel():
            f.write(f"{float(v)!r}\n")


def read_vector(path: str | Path) -> np.ndarray:
    values: list[float] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as e:
                raise ParseError(str(e), line_no) from e
    return np.asarray(values, dtype=float)


# ====================================================================
# 稀疏三元組
# ====================================================================

def write_triples(
    path: str | Path,
    matrix: np.ndarray,
    col_labels: Sequence[str] | None = None,
) -> int:
    """將矩陣的非零元素寫成 `row col weight` 三元組。

    Args:
        path: 輸出路徑
        matrix: 稠密矩陣（例如 k×n 的 Π̂）
        col_labels: 欄位外部標籤（例如原始節點 ID），未提供時使用欄索引

    Returns:
        寫出的三元組數量
    """
    mat = np.asarray(matrix, dtype=float)
    rows, cols = np.nonzero(mat)
    with open(path, "w", encoding="utf-8") as f:
        for r, c in zip(rows, cols):
            label = col_labels[c] if col_labels is not None else str(c)
            f.write(f"{r} {label} {float(mat[r, c])!r}\n")
    return len(rows)


def read_triples(path: str | Path) -> list[tuple[int, str, float]]:
    """讀取 `row col weight` 三元組，欄標籤保留為字串。"""
    triples: list[tuple[int, str, float]] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if len(tokens) != 3:
                raise ParseError(f"應為 3 個欄位，實際 {len(tokens)}", line_no)
            try:
                triples.append((int(tokens[0]), tokens[1], float(tokens[2])))
            except ValueError as e:
                raise ParseError(str(e), line_no) from e
    return triples


# ====================================================================
# key: value 報告與 CSV
# ====================================================================

def write_key_values(
    path: str | Path, values: Mapping[str, object], separator: str = ": "
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in values.items():
            f.write(f"{key}{separator}{value}\n")


def read_key_values(path: str | Path, separator: str = ":") -> dict[str, str]:
    """讀取 `key: value` 行；`#` 開頭的行略過。"""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if separator not in line:
                raise ParseError(f"缺少 {separator!r}: {line!r}", line_no)
            key, value = line.split(separator, 1)
            values[key.strip()] = value.strip()
    return values


def write_csv(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    logger.debug("已寫出 %s", path)
