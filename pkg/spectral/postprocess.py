"""後處理

將白化張量的特徵向量／特徵值轉回模型參數：主題-詞矩陣 μ̂、
社群成員矩陣 Π̂、Dirichlet 權重 α̂，並套用門檻。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from config import DEFAULT_THRESHOLD
from datasets.graph_io import NodePartition, SparseGraph
from errors import DegenerateComponentError, ValidationError
from spectral.stgd import EigenEstimate
from spectral.whitening import WhiteningContext

logger = logging.getLogger(__name__)


# ====================================================================
# 資料型別
# ====================================================================

@dataclass(frozen=True)
class TopicEstimate:
    mu_hat: np.ndarray          # d×k̂，欄隨機
    alpha_hat: np.ndarray
    Lambda: np.ndarray
    zero_columns: int = 0


@dataclass(frozen=True)
class CommunityEstimate:
    """k̂×n 的成員估計；raw 保留門檻前（已定號、未截斷）的矩陣供門檻掃描使用。"""

    Pi_hat: np.ndarray
    alpha_hat: np.ndarray
    threshold: float
    zero_columns: int
    raw: np.ndarray = field(repr=False, compare=False)

    @property
    def k_hat(self) -> int:
        return self.Pi_hat.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.Pi_hat.shape[1]

    def with_threshold(self, threshold: float) -> CommunityEstimate:
        Pi, zero = apply_threshold(self.raw, threshold)
        return CommunityEstimate(Pi, self.alpha_hat, threshold, zero, self.raw)


# ====================================================================
# 特徵值與權重
# ====================================================================

def eigenvalues_from_norms(Phi: np.ndarray) -> np.ndarray:
    """λᵢ = ‖φᵢ‖₂³。"""
    return np.linalg.norm(np.asarray(Phi, dtype=float), axis=0) ** 3


def dirichlet_weights(Lambda: np.ndarray) -> tuple[np.ndarray, float]:
    """α̂ᵢ = γ²λᵢ⁻²，γ = (Σλᵢ⁻²)^{-1/2} 使 Σα̂ᵢ = 1。回傳 (α̂, γ)。

    Raises:
        DegenerateComponentError: 任一 λᵢ = 0
    """
    Lambda = np.asarray(Lambda, dtype=float)
    zero = np.flatnonzero(Lambda == 0)
    if zero.size:
        raise DegenerateComponentError(zero.tolist())
    inv_sq = Lambda ** -2.0
    gamma = float(inv_sq.sum() ** -0.5)
    alpha_hat = gamma ** 2 * inv_sq
    return alpha_hat / alpha_hat.sum(), gamma


def _orient_and_clip(M: np.ndarray, axis: int) -> np.ndarray:
    """總和為負的向量翻號，之後負值夾為 0。axis=0 表示逐欄、1 表示逐列。"""
    sums = M.sum(axis=axis, keepdims=True)
    M = np.where(sums < 0, -M, M)
    return np.clip(M, 0.0, None)


def _normalize_columns(M: np.ndarray) -> tuple[np.ndarray, int]:
    sums = M.sum(axis=0, keepdims=True)
    zero = sums.ravel() <= 0
    safe = np.where(sums > 0, sums, 1.0)
    return M / safe, int(zero.sum())


# ====================================================================
# 主題
# ====================================================================

def recover_topics(ctx: WhiteningContext, est: EigenEstimate) -> TopicEstimate:
    """μ̂ = (Wᵀ)†Φ，每欄定號、負值夾 0 後正規化到單體。

    Raises:
        ValidationError: W 與 Φ 維度不符
        DegenerateComponentError: 任一 λᵢ = 0
    """
    if ctx.k != est.Phi.shape[0]:
        raise ValidationError(f"W 的 k={ctx.k} 與 Φ 的 {est.Phi.shape[0]} 不符")
    Lambda = eigenvalues_from_norms(est.Phi)
    alpha_hat, _ = dirichlet_weights(Lambda)
    mu = scipy.linalg.pinv(ctx.W.T) @ est.Phi
    mu, zero = _normalize_columns(_orient_and_clip(mu, axis=0))
    if zero:
        logger.warning("[後處理] %d 個主題在夾限後全為 0", zero)
    logger.info("[後處理] 主題估計完成：d=%d、k̂=%d", mu.shape[0], mu.shape[1])
    return TopicEstimate(mu_hat=mu, alpha_hat=alpha_hat, Lambda=Lambda, zero_columns=zero)


# ====================================================================
# 社群
# ====================================================================

def raw_memberships(
    graph: SparseGraph,
    part: NodePartition,
    ctx: WhiteningContext,
    est: EigenEstimate,
) -> np.ndarray:
    """A^c = X∪B∪C 的未截斷成員估計（k̂×|A^c|，欄依 A^c 遞增排序）。

    Π̂_{A^c} = γ^{1/3}·diag(Λ)⁻¹·V̂ᵀWᵀG_{A,A^c}，V̂ 為單位化的特徵向量。

    這裡以單位化的 V̂ = Φ·diag(‖φᵢ‖)⁻¹ 取代閉式中未正規化的 Φ：
    φᵢ 的範數為 λᵢ^{1/3}，直接代入 Φ 會使第 i 列多乘 λᵢ^{1/3}，讓大特徵值的
    社群在逐節點正規化時佔優勢。改用 V̂ 後各列的尺度只由 γ^{1/3}/λᵢ 決定。

    Raises:
        ValidationError: W 的列數與 |A| 不符
        DegenerateComponentError: 任一 λᵢ = 0
    """
    if ctx.dim != len(part.A):
        raise ValidationError(f"W 有 {ctx.dim} 列，|A|={len(part.A)}")
    Lambda = eigenvalues_from_norms(est.Phi)
    _, gamma = dirichlet_weights(Lambda)
    proj = ctx.W @ est.normalized()                       # |A|×k̂
    G = graph.block(part.A, part.complement_of_a())
    raw = np.asarray(G.T @ proj).T                        # k̂×|A^c|
    return gamma ** (1.0 / 3.0) * raw / Lambda[:, None]


def _align_rows(reference: np.ndarray, other: np.ndarray) -> np.ndarray:
    """找出使 other 的列與 reference 的列相關性總和最大的排列。"""
    k = reference.shape[0]
    corr = np.corrcoef(np.vstack([reference, other]))[:k, k:]
    corr = np.nan_to_num(corr, nan=0.0)
    _, cols = linear_sum_assignment(-corr)
    return cols


def apply_threshold(raw: np.ndarray, threshold: float) -> tuple[np.ndarray, int]:
    """定號、夾 0、正規化，將 ≤ threshold 的元素歸零後再正規化。

    Returns:
        (Π̂, 全零欄數量)

    Raises:
        ValidationError: threshold 不在 [0, 1]
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold 必須介於 [0, 1]: {threshold}")
    Pi, _ = _normalize_columns(_orient_and_clip(raw, axis=1))
    Pi = np.where(Pi <= threshold, 0.0, Pi)
    return _normalize_columns(Pi)


def recover_memberships(
    graph: SparseGraph,
    part: NodePartition,
    ctx: WhiteningContext,
    est: EigenEstimate,
    threshold: float = DEFAULT_THRESHOLD,
    exchange: tuple[WhiteningContext, EigenEstimate] | None = None,
) -> CommunityEstimate:
    """組合全部 n 個節點的成員估計。

    A^c 直接由本輪估計；A 的欄位取自 X、A 角色交換後的第二輪
    （exchange），其列先依 B∪C 上的相關性對齊到本輪的社群順序。

    Raises:
        ValidationError: threshold 不在 [0, 1] 或維度不符
        DegenerateComponentError: 任一 λᵢ = 0
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold 必須介於 [0, 1]: {threshold}")
    n, k_hat = graph.n_nodes, est.k
    alpha_hat, _ = dirichlet_weights(eigenvalues_from_norms(est.Phi))

    full = np.zeros((k_hat, n))
    full[:, part.complement_of_a()] = raw_memberships(graph, part, ctx, est)
    if exchange is not None:
        ctx2, est2 = exchange
        if est2.k != k_hat:
            raise ValidationError(f"交換輪的 k̂={est2.k} 與本輪 {k_hat} 不符")
        swapped = part.swapped()
        other = np.zeros((k_hat, n))
        other[:, swapped.complement_of_a()] = raw_memberships(graph, swapped, ctx2, est2)
        shared = np.sort(np.concatenate([part.B, part.C]))
        perm = _align_rows(full[:, shared], other[:, shared])
        full[:, part.A] = other[perm][:, part.A]
    else:
        logger.warning("[後處理] 未提供交換輪，集合 A 的 %d 個節點估計為 0", len(part.A))

    Pi, zero = apply_threshold(full, threshold)
    if zero:
        logger.warning("[後處理] %d 個節點在門檻 %.3g 後成員全為 0", zero, threshold)
    logger.info("[後處理] 社群估計完成：k̂=%d、n=%d、門檻 %.3g", k_hat, n, threshold)
    return CommunityEstimate(
        Pi_hat=Pi, alpha_hat=alpha_hat, threshold=threshold, zero_columns=zero, raw=full
    )
