"""合成資料產生器

依已知的真實參數產生 MMSB 圖與 LDA 語料，作為端對端測試的 oracle。
所有函式皆為 (輸入, seed) 的純函式。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from config import MIN_DOC_LENGTH
from datasets.graph_io import Corpus, SparseGraph, graph_from_edges
from errors import ValidationError

logger = logging.getLogger(__name__)

# 每個區塊最多抽樣的節點對數量
_PAIR_CHUNK: int = 4_000_000
# LDA 每個區塊最多抽樣的詞位數量
_WORD_CHUNK: int = 4_000_000


class EdgeModel(str, Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"


# ====================================================================
# 資料型別
# ====================================================================

@dataclass(frozen=True)
class DirichletSpec:
    """Dirichlet 集中度向量 α。

    block_model=True 表示 α₀ = 0 的區塊模型極限：每個樣本為 one-hot，
    類別依 α 的方向（正規化後）抽樣。
    """

    alpha: np.ndarray
    block_model: bool = False

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        object.__setattr__(self, "alpha", alpha)
        if alpha.size < 1:
            raise ValidationError("k 必須 >= 1")
        if self.block_model:
            if np.any(alpha < 0) or alpha.sum() <= 0:
                raise ValidationError("區塊模型的 α 方向必須非負且不全為 0")
        elif np.any(alpha <= 0):
            raise ValidationError(f"所有 α_i 必須 > 0: {alpha}")

    @classmethod
    def symmetric(cls, k: int, alpha0: float) -> DirichletSpec:
        """對稱 Dirichlet，α_i = α₀/k；α₀ = 0 時為均勻的區塊模型。"""
        if k < 1:
            raise ValidationError("k 必須 >= 1")
        if alpha0 < 0:
            raise ValidationError(f"α₀ 必須 >= 0: {alpha0}")
        if alpha0 == 0:
            return cls(alpha=np.ones(k), block_model=True)
        return cls(alpha=np.full(k, alpha0 / k))

    @property
    def k(self) -> int:
        return self.alpha.size

    @property
    def alpha0(self) -> float:
        return 0.0 if self.block_model else float(self.alpha.sum())

    @property
    def weights(self) -> np.ndarray:
        """α/Σα，即 E[π]。"""
        return self.alpha / self.alpha.sum()


@dataclass(frozen=True)
class GroundTruth:
    """真實參數。

    社群情境提供 Pi（k×n，欄隨機）與 P（k×k，元素在 [0,1] 或非負）；
    主題情境提供 mu（d×k，欄隨機）。
    """

    Pi: np.ndarray | None = None
    P: np.ndarray | None = None
    mu: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.Pi is not None:
            Pi = np.asarray(self.Pi, dtype=float)
            if np.any(Pi < 0) or not np.allclose(Pi.sum(axis=0), 1.0, atol=1e-10):
                raise ValidationError("Π 的每一欄必須位於單體上")
            object.__setattr__(self, "Pi", Pi)
        if self.P is not None:
            P = np.asarray(self.P, dtype=float)
            if P.ndim != 2 or P.shape[0] != P.shape[1]:
                raise ValidationError(f"P 必須為方陣: {P.shape}")
            if np.any(P < 0):
                raise ValidationError("P 的元素必須非負")
            if self.Pi is not None and P.shape[0] != self.Pi.shape[0]:
                raise ValidationError("P 與 Π 的社群數不符")
            object.__setattr__(self, "P", P)
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=float)
            if np.any(mu < 0) or not np.allclose(mu.sum(axis=0), 1.0, atol=1e-10):
                raise ValidationError("μ 的每一欄必須位於單體上")
            object.__setattr__(self, "mu", mu)


def connectivity_matrix(k: int, p_in: float, p_out: float) -> np.ndarray:
    """P = p_out·𝟙𝟙ᵀ + (p_in − p_out)·I。"""
    return np.full((k, k), p_out) + (p_in - p_out) * np.eye(k)


def random_topics(
    vocab_size: int, k: int, seed: int, concentration: float = 0.1
) -> np.ndarray:
    """每個主題的詞分佈獨立取自對稱 Dirichlet(concentration)。"""
    rng = np.random.default_rng(seed)
    mu = rng.dirichlet(np.full(vocab_size, concentration), size=k).T
    return mu / mu.sum(axis=0, keepdims=True)


# ====================================================================
# 抽樣
# ====================================================================

def _sample_columns(
    spec: DirichletSpec, n: int, rng: np.random.Generator
) -> np.ndarray:
    k = spec.k
    if spec.block_model:
        labels = rng.choice(k, size=n, p=spec.weights)
        Pi = np.zeros((k, n))
        Pi[labels, np.arange(n)] = 1.0
        return Pi
    # 以獨立 Gamma 抽樣再正規化得到 Dirichlet
    G = rng.gamma(spec.alpha[:, None], size=(k, n))
    sums = G.sum(axis=0, keepdims=True)
    # 極小的 α 可能讓整欄下溢為 0，此時退回類別抽樣
    empty = sums.ravel() == 0
    if empty.any():
        labels = rng.choice(k, size=int(empty.sum()), p=spec.weights)
        G[:, empty] = 0.0
        G[labels, np.flatnonzero(empty)] = 1.0
        sums = G.sum(axis=0, keepdims=True)
    return G / sums


def sample_memberships(spec: DirichletSpec, n: int, seed: int) -> np.ndarray:
    """抽樣 k×n 的成員矩陣 Π，每欄 i.i.d. Dirichlet(α)。

    Raises:
        ValidationError: n < 1
    """
    if n < 1:
        raise ValidationError(f"n 必須 >= 1: {n}")
    rng = np.random.default_rng(seed)
    return _sample_columns(spec, n, rng)


def generate_mmsb(
    truth: GroundTruth,
    model: EdgeModel | str,
    seed: int,
    directed: bool = False,
    bipartite_split: int | None = None,
) -> SparseGraph:
    """依 MMSB 產生圖：G_ij 以速率／機率 π_iᵀ P π_j 獨立抽樣。

    直接逐一抽樣所有節點對（分塊處理以限制記憶體），不使用稀疏捷徑。
    無向圖只抽上三角再鏡射；設定 bipartite_split 時只抽跨區塊的節點對。

    Raises:
        ValidationError: Bernoulli 模型的機率 > 1，或缺少 Π／P
    """
    model = EdgeModel(model)
    if truth.Pi is None or truth.P is None:
        raise ValidationError("generate_mmsb 需要 Π 與 P")
    Pi, P = truth.Pi, truth.P
    if model is EdgeModel.BERNOULLI and P.max(initial=0.0) > 1.0:
        raise ValidationError(f"Bernoulli 模型的 P 元素必須 ≤ 1: max={P.max()}")

    n = Pi.shape[1]
    if bipartite_split is not None and not 0 < bipartite_split < n:
        raise ValidationError(f"bipartite_split 必須介於 (0, {n}): {bipartite_split}")
    rng = np.random.default_rng(seed)
    left_proj = (Pi.T @ P)            # n×k
    chunk = max(1, _PAIR_CHUNK // max(n, 1))
    row_parts: list[np.ndarray] = []
    col_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []

    row_stop = bipartite_split if bipartite_split is not None else n
    for start in range(0, row_stop, chunk):
        stop = min(start + chunk, row_stop)
        rates = left_proj[start:stop] @ Pi          # (stop-start)×n
        if model is EdgeModel.BERNOULLI:
            if rates.max(initial=0.0) > 1.0 + 1e-12:
                raise ValidationError(f"邊機率 > 1: {rates.max()}")
            draws = (rng.random(rates.shape) < rates).astype(float)
        else:
            draws = rng.poisson(rates).astype(float)
        r_idx, c_idx = np.nonzero(draws)
        r_idx = r_idx + start
        if bipartite_split is not None:
            keep = c_idx >= bipartite_split
        elif directed:
            keep = r_idx != c_idx
        else:
            keep = c_idx > r_idx
        row_parts.append(r_idx[keep])
        col_parts.append(c_idx[keep])
        val_parts.append(draws[r_idx[keep] - start, c_idx[keep]])

    rows = np.concatenate(row_parts) if row_parts else np.empty(0, np.int64)
    cols = np.concatenate(col_parts) if col_parts else np.empty(0, np.int64)
    vals = np.concatenate(val_parts) if val_parts else np.empty(0)
    graph = graph_from_edges(
        rows, cols, n,
        weights=vals,
        directed=directed,
        weighted=model is EdgeModel.POISSON,
        bipartite_split=bipartite_split,
    )
    logger.info(
        "[產生] MMSB（%s）: n=%d、k=%d、儲存元素 %d",
        model.value, n, Pi.shape[0], graph.nnz,
    )
    return graph


def generate_lda(
    truth: GroundTruth,
    spec: DirichletSpec,
    n_docs: int,
    doc_length: int,
    seed: int,
) -> Corpus:
    """依 LDA 產生語料：每份文件抽 h ~ Dir(α)，再抽 doc_length 個 i.i.d. 詞。

    逐詞位抽樣後直接組成稀疏詞頻矩陣，記憶體與 n_docs·doc_length 成正比，
    不配置 n_docs×d 的稠密陣列。

    Raises:
        ValidationError: doc_length < 3、n_docs < 1 或 μ 與 α 維度不符
    """
    if doc_length < MIN_DOC_LENGTH:
        raise ValidationError(f"doc_length 必須 >= {MIN_DOC_LENGTH}: {doc_length}")
    if n_docs < 1:
        raise ValidationError(f"n_docs 必須 >= 1: {n_docs}")
    if truth.mu is None:
        raise ValidationError("generate_lda 需要 μ")
    mu = truth.mu
    if mu.shape[1] != spec.k:
        raise ValidationError(f"μ 有 {mu.shape[1]} 個主題，α 有 {spec.k} 個")

    rng = np.random.default_rng(seed)
    H = _sample_columns(spec, n_docs, rng)         # k×n_docs
    mu_cdf = np.cumsum(mu, axis=0)
    mu_cdf[-1] = 1.0
    k, d = spec.k, mu.shape[0]
    chunk = max(1, _WORD_CHUNK // (doc_length * k))
    row_parts: list[np.ndarray] = []
    word_parts: list[np.ndarray] = []
    for start in range(0, n_docs, chunk):
        stop = min(start + chunk, n_docs)
        # 每個詞位先抽主題 z ~ h_t，再抽詞 w ~ μ_z
        h_cdf = np.cumsum(H[:, start:stop], axis=0).T
        h_cdf[:, -1] = 1.0
        u = rng.random((stop - start, doc_length))
        topics = (u[:, :, None] > h_cdf[:, None, :]).sum(axis=2)
        v = rng.random(topics.shape)
        words = np.empty(topics.shape, dtype=np.int64)
        for z in range(k):
            mask = topics == z
            words[mask] = np.searchsorted(mu_cdf[:, z], v[mask], side="right")
        row_parts.append(np.repeat(np.arange(start, stop), doc_length))
        word_parts.append(np.minimum(words, d - 1).ravel())
    rows = np.concatenate(row_parts)
    freq = sp.coo_matrix(
        (np.ones(rows.size), (rows, np.concatenate(word_parts))), shape=(n_docs, d)
    ).tocsr()
    freq.sum_duplicates()
    freq.sort_indices()
    logger.info(
        "[產生] LDA: %d 份文件、詞彙 %d、k=%d", n_docs, mu.shape[0], spec.k
    )
    return Corpus(freq=freq, doc_ids=tuple(range(1, n_docs + 1)))
