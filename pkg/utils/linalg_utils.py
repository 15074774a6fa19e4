"""共用線性代數工具函式

隨機投影、正交化、欄符號慣例與夾限的對稱特徵分解。
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from config import EIG_CLAMP_REL


def gaussian_projection(
    n: int, width: int, rng: np.random.Generator
) -> np.ndarray:
    """產生 n×width 的高斯隨機矩陣，每欄正規化為單位長度。"""
    S = rng.standard_normal((n, width))
    S /= np.linalg.norm(S, axis=0, keepdims=True)
    return S


def orthonormalize(Y: np.ndarray) -> np.ndarray:
    """以 economic QR 取得 Y 欄空間的正交基底。"""
    Q, _ = scipy.linalg.qr(Y, mode="economic")
    return Q


def fix_column_signs(M: np.ndarray) -> np.ndarray:
    """翻轉欄符號，使每欄絕對值最大的元素為正。"""
    M = np.array(M, dtype=float, copy=True)
    if M.size == 0:
        return M
    idx = np.argmax(np.abs(M), axis=0)
    signs = np.sign(M[idx, np.arange(M.shape[1])])
    signs[signs == 0] = 1.0
    return M * signs


def clamped_eigh(S: np.ndarray, clamp_rel: float = EIG_CLAMP_REL) -> tuple[
    np.ndarray, np.ndarray
]:
    """對稱矩陣的特徵分解，特徵值由大到小排序。

    介於 [-clamp_rel·λ_max, 0) 的微小負特徵值視為數值誤差並夾為 0；
    更負的特徵值保留原值，由呼叫端判斷秩。
    """
    sym = 0.5 * (S + S.T)
    evals, evecs = scipy.linalg.eigh(sym)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    lam_max = max(float(evals[0]), 0.0) if evals.size else 0.0
    small_neg = (evals < 0) & (evals >= -clamp_rel * lam_max)
    evals = np.where(small_neg, 0.0, evals)
    return evals, evecs


def numerical_rank(values: np.ndarray, rank_tol: float) -> int:
    """依相對門檻 rank_tol·max 計算數值秩。"""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0
    top = float(np.max(values))
    if top <= 0:
        return 0
    return int(np.sum(values >= rank_tol * top))
