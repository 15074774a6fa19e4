"""一階、二階經驗動差與三階樣本串流

社群情境以 Pairs 矩陣與對稱化矩陣 Z_B、Z_C 的低秩因子建構 M2；
主題情境以稀疏詞頻矩陣的 Gram 形式累積 M2。三階動差從不顯式組成，
只提供逐樣本的原始向量三元組，交由 STGD 隱式使用。
"""
from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from config import (
    DEBUG_DUMP_MAX_DIM,
    DEFAULT_POWER_ITERS,
    DEFAULT_RANK_TOL,
    EXACT_WHITEN_MAX_DIM,
    MIN_DOC_LENGTH,
    PROJECTION_FACTOR,
)
from datasets.graph_io import Corpus, NodePartition, SparseGraph
from errors import DegenerateMomentError, ValidationError
from spectral.whitening import sparse_svd
from utils.alloc_audit import record
from utils.linalg_utils import gaussian_projection, numerical_rank, orthonormalize
from utils.parallel_utils import chunked_reduce
from utils.text_io import write_dense

logger = logging.getLogger(__name__)

PINV_METHODS: tuple[str, ...] = ("randomized", "lanczos")


# ====================================================================
# Pairs 與低秩因子
# ====================================================================

@dataclass(frozen=True)
class PairsMatrix:
    """Pairs(Y1, Y2) = G_{X,Y1}ᵀ G_{X,Y2} / |X|，以兩個稀疏區塊隱式表示。"""

    left_block: sp.csr_matrix
    right_block: sp.csr_matrix
    labels: tuple[str, str] = ("", "")

    @property
    def n_samples(self) -> int:
        return self.left_block.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left_block.shape[1], self.right_block.shape[1])

    def matmat(self, V: np.ndarray) -> np.ndarray:
        return np.asarray(self.left_block.T @ (self.right_block @ V)) / self.n_samples

    def rmatmat(self, U: np.ndarray) -> np.ndarray:
        return np.asarray(self.right_block.T @ (self.left_block @ U)) / self.n_samples

    def transpose(self) -> PairsMatrix:
        return PairsMatrix(self.right_block, self.left_block, self.labels[::-1])

    def as_operator(self) -> LinearOperator:
        return LinearOperator(
            self.shape,
            matvec=self.matmat,
            rmatvec=self.rmatmat,
            matmat=self.matmat,
            rmatmat=self.rmatmat,
            dtype=float,
        )

    def expand(self) -> np.ndarray:
        """展開為稠密矩陣（僅供小規模測試）。"""
        return (self.left_block.T @ self.right_block).toarray() / self.n_samples


@dataclass(frozen=True)
class LowRankFactor:
    """left @ core @ right.T；left 為 p×r、core 為 r×r、right 為 q×r。"""

    left: np.ndarray
    core: np.ndarray
    right: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left.shape[0], self.right.shape[0])

    @property
    def rank(self) -> int:
        return self.core.shape[0]

    def matmat(self, V: np.ndarray) -> np.ndarray:
        return self.left @ (self.core @ (self.right.T @ V))

    def rmatmat(self, U: np.ndarray) -> np.ndarray:
        return self.right @ (self.core.T @ (self.left.T @ U))

    def expand(self) -> np.ndarray:
        return self.left @ self.core @ self.right.T


@dataclass(frozen=True)
class SymmetrizationPair:
    """Z_B = Pairs(A,C)·Pairs(B,C)†、Z_C = Pairs(A,B)·Pairs(C,B)†，皆為低秩因子。"""

    Z_B: LowRankFactor
    Z_C: LowRankFactor
    singular_values: np.ndarray


@dataclass(frozen=True)
class SymmetricFactored:
    """對稱矩陣的因子形式，所有非 None 的項相加：

        basis·core·basisᵀ + gram_scale·DᵀD + outer_scale·vvᵀ + diag(d)
    """

    dim: int
    basis: np.ndarray | None = None
    core: np.ndarray | None = None
    gram_data: sp.csr_matrix | None = None
    gram_scale: float = 0.0
    outer_vec: np.ndarray | None = None
    outer_scale: float = 0.0
    diag: np.ndarray | None = None

    def matmat(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        squeeze = V.ndim == 1
        V2 = V.reshape(self.dim, -1)
        out = np.zeros((self.dim, V2.shape[1]))
        if self.basis is not None and self.core is not None:
            out += self.basis @ (self.core @ (self.basis.T @ V2))
        if self.gram_data is not None and self.gram_scale != 0.0:
            out += self.gram_scale * np.asarray(
                self.gram_data.T @ (self.gram_data @ V2)
            )
        if self.outer_vec is not None and self.outer_scale != 0.0:
            out += self.outer_scale * np.outer(self.outer_vec, self.outer_vec @ V2)
        if self.diag is not None:
            out += self.diag[:, None] * V2
        return out.ravel() if squeeze else out

    def as_operator(self) -> LinearOperator:
        return LinearOperator(
            (self.dim, self.dim),
            matvec=self.matmat,
            rmatvec=self.matmat,
            matmat=self.matmat,
            rmatmat=self.matmat,
            dtype=float,
        )

    def expand(self, max_dim: int = EXACT_WHITEN_MAX_DIM) -> np.ndarray:
        """展開為稠密矩陣；維度超過 max_dim 時拒絕。"""
        if self.dim > max_dim:
            raise ValidationError(f"維度 {self.dim} 超過可展開上限 {max_dim}")
        return self.matmat(np.eye(self.dim))


@dataclass(frozen=True)
class MomentSummary:
    """M1、因子形式的 M2，以及中心化使用的 α₀。"""

    M1: np.ndarray
    M2: SymmetricFactored
    alpha0: float
    n_samples: int
    path: str = "community"


@dataclass(frozen=True)
class DocumentWeights:
    """每份文件的正規化權重：first = 1/L、pair = 1/(L(L−1))、triple = 1/(L(L−1)(L−2))。

    乘上這些權重後，c_t、c_t⊗c_t − diag(c_t) 與去除重複詞的三階項分別是
    單一詞、相異詞對、相異詞三元組分佈的不偏估計。
    """

    first: np.ndarray
    pair: np.ndarray
    triple: np.ndarray


def document_weights(lengths: np.ndarray, normalize: bool = True) -> DocumentWeights:
    """由文件長度計算權重；normalize=False 時全為 1（逐字的計數形式）。

    Raises:
        ValidationError: normalize 時有文件長度 < 3
    """
    L = np.asarray(lengths, dtype=float)
    if not normalize:
        ones = np.ones_like(L)
        return DocumentWeights(ones, ones, ones)
    if L.size and L.min() < MIN_DOC_LENGTH:
        raise ValidationError(f"正規化需要每份文件至少 {MIN_DOC_LENGTH} 個詞: 最短 {L.min():g}")
    return DocumentWeights(
        first=1.0 / L,
        pair=1.0 / (L * (L - 1.0)),
        triple=1.0 / (L * (L - 1.0) * (L - 2.0)),
    )


# ====================================================================
# Pairs 與對稱化
# ====================================================================

def compute_pairs(
    graph: SparseGraph, part: NodePartition, y1: str, y2: str
) -> PairsMatrix:
    """建立 Pairs(Y1, Y2)，以 |X| 正規化且不展開。

    Raises:
        ValidationError: X 或 Y1、Y2 為空
    """
    X = part.X
    if len(X) == 0:
        raise ValidationError("集合 X 為空")
    rows1, rows2 = part.get(y1), part.get(y2)
    if len(rows1) == 0 or len(rows2) == 0:
        raise ValidationError(f"集合 {y1} 或 {y2} 為空")
    return PairsMatrix(
        left_block=graph.block(X, rows1),
        right_block=graph.block(X, rows2),
        labels=(y1, y2),
    )


def truncated_pairs_svd(
    pairs: PairsMatrix,
    k: int,
    method: str = "randomized",
    seed: int = 0,
    power_iters: int = DEFAULT_POWER_ITERS,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs 矩陣的秩-k 截斷 SVD：回傳 (U, s, V)，Pairs ≈ U diag(s) Vᵀ。

    randomized：以寬度 k̃ = 2k 的單位欄隨機矩陣 S 投影 Ξ = Pairs·S，
    經 power iteration 與 QR 後對 k̃×|Y2| 的小矩陣做 SVD。
    lanczos：以 sparse_svd 對隱式運算子求解。

    Raises:
        DegenerateMomentError: σ_k < rank_tol·σ_1
    """
    name = f"Pairs({pairs.labels[0]},{pairs.labels[1]})"
    if k > min(pairs.shape):
        raise DegenerateMomentError(name, min(pairs.shape), k)
    if method == "lanczos":
        U, s, V = sparse_svd(pairs.as_operator(), k, seed=seed)
    elif method == "randomized":
        rng = np.random.default_rng(seed)
        width = min(PROJECTION_FACTOR * k, min(pairs.shape))
        S = gaussian_projection(pairs.shape[1], width, rng)
        Xi = record("Xi", pairs.matmat(S))
        for _ in range(power_iters):
            Xi = pairs.matmat(pairs.rmatmat(orthonormalize(Xi)))
        Q = record("Q_pairs", orthonormalize(Xi))
        B = record("B_pairs", pairs.rmatmat(Q).T)      # k̃×|Y2|
        Ub, s_all, Vt = scipy.linalg.svd(B, full_matrices=False)
        U = Q @ Ub[:, :k]
        s = s_all[:k]
        V = Vt[:k].T
        if numerical_rank(s_all, rank_tol) < k:
            raise DegenerateMomentError(name, numerical_rank(s_all, rank_tol), k)
    else:
        raise ValidationError(f"未知的偽逆方法: {method!r}（可用 {PINV_METHODS}）")

    rank = numerical_rank(s, rank_tol)
    if rank < k:
        raise DegenerateMomentError(name, rank, k)
    return U, s, V


def compute_symmetrizers(
    graph: SparseGraph,
    part: NodePartition,
    k: int,
    method: str = "randomized",
    seed: int = 0,
    power_iters: int = DEFAULT_POWER_ITERS,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> SymmetrizationPair:
    """計算 Z_B、Z_C 並保持低秩因子形式。

    只需要一次 Pairs(B,C) ≈ U diag(s) Vᵀ 的秩-k 分解：
    Pairs(B,C)† = V diag(1/s) Uᵀ，Pairs(C,B)† = U diag(1/s) Vᵀ。

    Raises:
        ValidationError: |B| 或 |C| < k
        DegenerateMomentError: Pairs(B,C) 的數值秩 < k
    """
    if len(part.B) < k or len(part.C) < k:
        raise ValidationError(f"|B|={len(part.B)}、|C|={len(part.C)} 必須 >= k={k}")
    pairs_bc = compute_pairs(graph, part, "B", "C")
    U, s, V = truncated_pairs_svd(pairs_bc, k, method, seed, power_iters, rank_tol)
    core = np.diag(1.0 / s)
    pairs_ac = compute_pairs(graph, part, "A", "C")
    pairs_ab = compute_pairs(graph, part, "A", "B")
    Z_B = LowRankFactor(left=record("Z_B.left", pairs_ac.matmat(V)), core=core, right=U)
    Z_C = LowRankFactor(left=record("Z_C.left", pairs_ab.matmat(U)), core=core, right=V)
    logger.debug("[動差] Pairs(B,C) 前 %d 個奇異值: %s", k, s)
    return SymmetrizationPair(Z_B=Z_B, Z_C=Z_C, singular_values=s)


# ====================================================================
# M1、M2
# ====================================================================

def _column_mean(block: sp.csr_matrix, workers: int) -> np.ndarray:
    n = block.shape[0]
    total = chunked_reduce(
        lambda s, e: np.asarray(block[s:e].sum(axis=0)).ravel(), n, workers
    )
    return total / n


def compute_m2_community(
    graph: SparseGraph,
    part: NodePartition,
    symm: SymmetrizationPair,
    alpha0: float,
    workers: int = 1,
) -> MomentSummary:
    """社群情境的 M1 與因子形式 M2。

    S = (1/n_X) Σ_x Z_C G_{x,C}ᵀ G_{x,B} Z_Bᵀ 依序以 k×k 的中間量計算，
    從不形成 n×n 物件。M2 取 S 的對稱部分：

        M2 = (α₀+1)·½(S + Sᵀ) − α₀·(M1M1ᵀ − diag(M1M1ᵀ))

    Raises:
        ValidationError: α₀ < 0 或 X 為空
    """
    if alpha0 < 0:
        raise ValidationError(f"α₀ 必須 >= 0: {alpha0}")
    X = part.X
    if len(X) == 0:
        raise ValidationError("集合 X 為空")
    n_x = len(X)
    G_xa = graph.block(X, part.A)
    G_xb = graph.block(X, part.B)
    G_xc = graph.block(X, part.C)

    M1 = _column_mean(G_xa, workers)
    GB_R = record("G_XB·R_B", np.asarray(G_xb @ symm.Z_B.right))     # n_X×k
    GC_R = record("G_XC·R_C", np.asarray(G_xc @ symm.Z_C.right))     # n_X×k
    inner = chunked_reduce(lambda s, e: GC_R[s:e].T @ GB_R[s:e], n_x, workers) / n_x
    K = symm.Z_C.core @ inner @ symm.Z_B.core.T

    r = K.shape[0]
    basis = record("M2.basis", np.hstack([symm.Z_C.left, symm.Z_B.left]))
    core = np.zeros((2 * r, 2 * r))
    core[:r, r:] = 0.5 * K
    core[r:, :r] = 0.5 * K.T
    M2 = SymmetricFactored(
        dim=len(part.A),
        basis=basis,
        core=(alpha0 + 1.0) * core,
        outer_vec=M1,
        outer_scale=-alpha0,
        diag=alpha0 * M1 * M1 if alpha0 else None,
    )
    logger.info("[動差] 社群 M2：n_A=%d、n_X=%d、α₀=%g", len(part.A), n_x, alpha0)
    return MomentSummary(M1=M1, M2=M2, alpha0=alpha0, n_samples=n_x)


def compute_m2_topic(
    corpus: Corpus, alpha0: float, workers: int = 1, normalize: bool = True
) -> MomentSummary:
    """主題情境的 M1 與 M2（以稀疏 Gram 形式累積，天然對稱）。

        M1 = 1/n · Σ_t w1_t·c_t
        M2 = (α₀+1)/n · Σ_t w2_t·(c_t c_tᵀ − diag(c_t)) − α₀·M1M1ᵀ

    normalize=True 時 w1 = 1/L、w2 = 1/(L(L−1))，M1、M2 才是詞分佈與
    相異詞對分佈的不偏估計；normalize=False 時權重為 1（原始計數形式）。

    Raises:
        ValidationError: α₀ < 0、語料為空，或正規化時文件長度 < 3
    """
    if alpha0 < 0:
        raise ValidationError(f"α₀ 必須 >= 0: {alpha0}")
    n = corpus.n_docs
    if n == 0:
        raise ValidationError("語料中沒有可用的文件")
    C = corpus.freq
    weights = document_weights(np.asarray(C.sum(axis=1)).ravel(), normalize)
    C1 = sp.diags(weights.first) @ C
    col_sum = chunked_reduce(
        lambda s, e: np.asarray(C1[s:e].sum(axis=0)).ravel(), n, workers
    )
    M1 = col_sum / n
    scale = (alpha0 + 1.0) / n
    pair_diag = np.asarray(C.T @ weights.pair).ravel()
    M2 = SymmetricFactored(
        dim=corpus.vocab_size,
        gram_data=sp.csr_matrix(sp.diags(np.sqrt(weights.pair)) @ C),
        gram_scale=scale,
        outer_vec=M1,
        outer_scale=-alpha0,
        diag=-scale * pair_diag,
    )
    logger.info(
        "[動差] 主題 M2：d=%d、n=%d、α₀=%g、正規化=%s",
        corpus.vocab_size, n, alpha0, normalize,
    )
    return MomentSummary(M1=M1, M2=M2, alpha0=alpha0, n_samples=n, path="topic")


def dump_expanded_m2(summary: MomentSummary, path: str | Path) -> None:
    """將展開後的 M2 寫成稠密文字（除錯用，維度 ≤ 200）。"""
    write_dense(path, summary.M2.expand(max_dim=DEBUG_DUMP_MAX_DIM))


# ====================================================================
# 三階樣本串流
# ====================================================================

@dataclass(frozen=True)
class SampleTriple:
    """一個樣本的三個原始視角（1×dim 稀疏列）。"""

    index: int
    a: sp.csr_matrix
    b: sp.csr_matrix
    c: sp.csr_matrix


class SampleStream:
    """可重複迭代、可依種子洗牌的原始樣本三元組串流。

    view_a、view_b、view_c 為 n_samples×dim 的稀疏矩陣；主題情境三者
    為同一個物件。
    doc_weights 僅主題情境提供，用於每份文件的重複詞修正。
    """

    def __init__(
        self,
        view_a: sp.csr_matrix,
        view_b: sp.csr_matrix,
        view_c: sp.csr_matrix,
        alpha0: float,
        sample_ids: np.ndarray,
        seed: int | None = None,
        doc_weights: DocumentWeights | None = None,
    ) -> None:
        if not (view_a.shape[0] == view_b.shape[0] == view_c.shape[0]):
            raise ValidationError("三個視角的樣本數不一致")
        self.view_a = view_a
        self.view_b = view_b
        self.view_c = view_c
        self.alpha0 = alpha0
        self.sample_ids = np.asarray(sample_ids)
        self.seed = seed
        self.doc_weights = doc_weights

    @property
    def n_samples(self) -> int:
        return self.view_a.shape[0]

    @property
    def aliased(self) -> bool:
        return self.view_a is self.view_b and self.view_b is self.view_c

    def __len__(self) -> int:
        return self.n_samples

    def order(self) -> np.ndarray:
        if self.seed is None:
            return np.arange(self.n_samples)
        return np.random.default_rng(self.seed).permutation(self.n_samples)

    def shuffled(self, seed: int) -> SampleStream:
        return SampleStream(
            self.view_a, self.view_b, self.view_c,
            self.alpha0, self.sample_ids, seed=seed,
            doc_weights=self.doc_weights,
        )

    def __iter__(self) -> Iterator[SampleTriple]:
        for idx in self.order():
            a = self.view_a[idx]
            if self.aliased:
                yield SampleTriple(int(idx), a, a, a)
            else:
                yield SampleTriple(int(idx), a, self.view_b[idx], self.view_c[idx])


def third_moment_sample_stream(
    source: SparseGraph | Corpus,
    alpha0: float,
    part: NodePartition | None = None,
    seed: int | None = None,
    normalize: bool = True,
) -> SampleStream:
    """建立三階動差的原始樣本串流。

    社群情境對每個 x∈X 產生 (G_{x,A}ᵀ, G_{x,B}ᵀ, G_{x,C}ᵀ)；
    主題情境對每份文件產生 (c_t, c_t, c_t)，並附上文件權重，
    normalize 的意義與 compute_m2_topic 相同。

    Raises:
        ValidationError: 社群情境未提供分割
    """
    if isinstance(source, Corpus):
        C = source.freq
        weights = document_weights(np.asarray(C.sum(axis=1)).ravel(), normalize)
        return SampleStream(
            C, C, C, alpha0, np.arange(source.n_docs), seed=seed,
            doc_weights=weights,
        )
    if part is None:
        raise ValidationError("社群情境需要節點分割")
    X = part.X
    return SampleStream(
        source.block(X, part.A),
        source.block(X, part.B),
        source.block(X, part.C),
        alpha0,
        X,
        seed=seed,
    )
