"""白化

由因子形式的 M2 計算秩-k 白化矩陣 W（WᵀM2W = I），並將原始樣本
投影成 k 維的白化視角 y_A、y_B、y_C。另提供以 Lanczos 實作的稀疏
截斷 SVD。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, aslinearoperator, svds

from config import (
    DEFAULT_POWER_ITERS,
    DEFAULT_RANK_TOL,
    EXACT_WHITEN_MAX_DIM,
    LANCZOS_MAX_ITER,
    LANCZOS_RESIDUAL_REL,
    PROJECTION_FACTOR,
)
from errors import ConfigurationError, ConvergenceError, DegenerateMomentError, ValidationError
from utils.alloc_audit import record
from utils.linalg_utils import (
    clamped_eigh,
    fix_column_signs,
    gaussian_projection,
    numerical_rank,
    orthonormalize,
)
from utils.parallel_utils import chunked_map

if TYPE_CHECKING:
    from spectral.moments import LowRankFactor, MomentSummary, SampleStream, SymmetrizationPair

logger = logging.getLogger(__name__)

WHITEN_METHODS: tuple[str, ...] = ("tall-thin-svd", "tall-thin-qr", "exact-small")


# ====================================================================
# 資料型別
# ====================================================================

@dataclass(frozen=True)
class WhiteningContext:
    """白化矩陣與 M2 的前 k 個特徵值（M2 半正定時即奇異值）。"""

    W: np.ndarray
    singular_values: np.ndarray
    method: str
    projection_seed: int
    projection_width: int

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.W)):
            raise ValidationError("W 含非有限值")
        if np.any(self.singular_values <= 0):
            raise ValidationError("白化的奇異值必須為正")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def whitening_error(self, m2: MomentSummary) -> float:
        """‖WᵀM2W − I‖_F，只用矩陣-向量乘積計算。"""
        core = self.W.T @ m2.M2.matmat(self.W)
        return float(np.linalg.norm(core - np.eye(self.k)))


@dataclass(frozen=True)
class SampleBatch:
    """一批白化樣本（b×k）。

    主題情境另帶原始詞頻 counts（b×d）、白化矩陣 W 與文件權重，
    三階項據此扣除同一個詞重複出現的貢獻；社群情境這些欄位為 None。
    """

    y_a: np.ndarray
    y_b: np.ndarray
    y_c: np.ndarray
    counts: sp.csr_matrix | None = None
    W: np.ndarray | None = None
    pair_weight: np.ndarray | None = None
    triple_weight: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.y_a.shape[0]

    @property
    def corrected(self) -> bool:
        return self.counts is not None


@dataclass(frozen=True)
class WhitenedViews:
    """每個樣本的白化三元組（以 n×k 矩陣的列保存）與其平均。

    主題情境的平均為 mean(y/L)，並保留詞頻與文件權重（見 SampleBatch）。
    """

    y_a: np.ndarray
    y_b: np.ndarray
    y_c: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    mu_c: np.ndarray
    sample_ids: np.ndarray
    alpha0: float = 0.0
    counts: sp.csr_matrix | None = field(default=None, repr=False)
    W: np.ndarray | None = field(default=None, repr=False)
    pair_weight: np.ndarray | None = field(default=None, repr=False)
    triple_weight: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return self.y_a.shape[0]

    @property
    def k(self) -> int:
        return self.y_a.shape[1]

    def batch(self, idx: np.ndarray | slice) -> SampleBatch:
        if self.counts is None:
            return SampleBatch(self.y_a[idx], self.y_b[idx], self.y_c[idx])
        y = self.y_a[idx]
        return SampleBatch(
            y, y, y,
            counts=self.counts[idx],
            W=self.W,
            pair_weight=self.pair_weight[idx],
            triple_weight=self.triple_weight[idx],
        )

    def full(self) -> SampleBatch:
        return self.batch(slice(None))

    @classmethod
    def from_arrays(
        cls,
        y_a: np.ndarray,
        y_b: np.ndarray,
        y_c: np.ndarray,
        alpha0: float = 0.0,
        sample_ids: np.ndarray | None = None,
    ) -> WhitenedViews:
        """由現成的白化向量建立（合成測試用），平均一併計算。"""
        y_a, y_b, y_c = (np.atleast_2d(np.asarray(y, dtype=float)) for y in (y_a, y_b, y_c))
        if not (y_a.shape == y_b.shape == y_c.shape):
            raise ValidationError(f"三個視角形狀不一致: {y_a.shape}, {y_b.shape}, {y_c.shape}")
        if y_a.shape[0] == 0:
            raise ValidationError("白化視角為空")
        if sample_ids is None:
            sample_ids = np.arange(y_a.shape[0])
        return cls(
            y_a, y_b, y_c,
            y_a.mean(axis=0), y_b.mean(axis=0), y_c.mean(axis=0),
            np.asarray(sample_ids), alpha0,
        )


# ====================================================================
# 稀疏 SVD
# ====================================================================

def sparse_svd(
    matrix: sp.spmatrix | np.ndarray | LinearOperator,
    k: int,
    seed: int = 0,
    max_iter: int = LANCZOS_MAX_ITER,
    residual_rel: float = LANCZOS_RESIDUAL_REL,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """以 Lanczos（ARPACK）計算前 k 個奇異三元組 (U, s, V)，s 由大到小。

    起始向量由 seed 決定；每欄依「絕對值最大元素為正」的慣例定號，
    U 與 V 同步翻轉。

    Raises:
        ValidationError: k 不在 [1, min(shape)) 之間
        ConvergenceError: ARPACK 未收斂，或 ‖Av − σu‖ > residual_rel·σ_1
    """
    op = aslinearoperator(matrix)
    m, n = op.shape
    if not 1 <= k < min(m, n):
        raise ValidationError(f"sparse_svd 需要 1 <= k < min{op.shape}: k={k}")
    v0 = np.random.default_rng(seed).standard_normal(min(m, n))
    try:
        U, s, Vt = svds(op, k=k, v0=v0, maxiter=max_iter, solver="arpack")
    except ArpackNoConvergence as e:
        raise ConvergenceError(f"Lanczos 在 {max_iter} 次疊代內未收斂", float("inf")) from e

    order = np.argsort(s)[::-1]
    s = s[order]
    U = U[:, order]
    V = Vt[order].T
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    U = U * signs
    V = V * signs

    residual = float(np.max(np.linalg.norm(op.matmat(V) - U * s, axis=0)))
    limit = residual_rel * max(float(s[0]), np.finfo(float).tiny)
    if residual > limit:
        raise ConvergenceError("Lanczos 殘差超過容忍度", residual)
    logger.debug("[白化] Lanczos 完成：k=%d、最大殘差 %.2e", k, residual)
    return U, s, V


# ====================================================================
# 白化矩陣
# ====================================================================

def _whiten_from_core(
    Q: np.ndarray, core: np.ndarray, k: int, rank_tol: float
) -> tuple[np.ndarray, np.ndarray]:
    evals, evecs = clamped_eigh(core)
    rank = numerical_rank(np.clip(evals, 0.0, None), rank_tol)
    if rank < k:
        raise DegenerateMomentError("M2", rank, k)
    vals = evals[:k]
    W = Q @ (evecs[:, :k] / np.sqrt(vals))
    return W, vals


def randomized_whiten(
    m2: MomentSummary,
    k: int,
    method: str = "tall-thin-svd",
    seed: int = 0,
    power_iters: int = DEFAULT_POWER_ITERS,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> WhiteningContext:
    """計算白化矩陣 W。

    隨機路徑以寬度 k̃ = 2k 的單位欄高斯矩陣 S 取得 O = M2·S
    （可選 power iteration），再由 O 的 tall-thin SVD 或 QR 得到正交
    基底 Q，最後對 k̃×k̃ 的 QᵀM2Q 做特徵分解取前 k 個方向：
    W = Q·E_k·D_k^{-1/2}。exact-small 路徑直接對展開的 M2 做特徵分解。

    Raises:
        ValidationError: 未知的 method 或 k < 1
        ConfigurationError: exact-small 用在維度 > 2000 的 M2
        DegenerateMomentError: M2 的數值秩 < k
    """
    if method not in WHITEN_METHODS:
        raise ValidationError(f"未知的白化方法: {method!r}（可用 {WHITEN_METHODS}）")
    if k < 1:
        raise ValidationError(f"k 必須 >= 1: {k}")
    M2 = m2.M2
    p = M2.dim
    if k > p:
        raise DegenerateMomentError("M2", p, k)

    if method == "exact-small":
        if p > EXACT_WHITEN_MAX_DIM:
            raise ConfigurationError(
                f"exact-small 只適用於維度 <= {EXACT_WHITEN_MAX_DIM}，目前為 {p}"
            )
        W, vals = _whiten_from_core(np.eye(p), M2.expand(), k, rank_tol)
        width = p
    else:
        rng = np.random.default_rng(seed)
        width = min(PROJECTION_FACTOR * k, p)
        S = gaussian_projection(p, width, rng)
        O = record("O", M2.matmat(S))
        Omega = S.T @ O
        logger.debug("[白化] Ω 對角線: %s", np.diag(Omega))
        for _ in range(power_iters):
            O = M2.matmat(M2.matmat(orthonormalize(O)))

        if method == "tall-thin-svd":
            U_o, s_o, _ = scipy.linalg.svd(O, full_matrices=False)
            keep = max(numerical_rank(s_o, rank_tol), 1)
            Q = U_o[:, :keep]
        else:
            Q = orthonormalize(O)
        Q = record("Q", Q)
        core = Q.T @ M2.matmat(Q)
        W, vals = _whiten_from_core(Q, core, k, rank_tol)

    W = record("W", fix_column_signs(W))
    logger.info(
        "[白化] %s：維度 %d、k=%d、k̃=%d、特徵值範圍 [%.3e, %.3e]",
        method, p, k, width, vals[-1], vals[0],
    )
    return WhiteningContext(
        W=W,
        singular_values=vals,
        method=method,
        projection_seed=seed,
        projection_width=width,
    )


# ====================================================================
# 白化視角
# ====================================================================

def _symmetrized_projection(W: np.ndarray, Z: LowRankFactor) -> np.ndarray:
    """Zᵀ W，結果為 |B|×k（或 |C|×k）。"""
    return Z.rmatmat(W)


def _project_rows(
    view: sp.csr_matrix, proj: np.ndarray, workers: int
) -> np.ndarray:
    parts = chunked_map(
        lambda s, e: np.asarray(view[s:e] @ proj), view.shape[0], workers
    )
    if not parts:
        return np.zeros((0, proj.shape[1]))
    return np.vstack(parts)


def whiten_views(
    ctx: WhiteningContext,
    stream: SampleStream,
    symm: SymmetrizationPair | None = None,
    workers: int = 1,
) -> WhitenedViews:
    """將整個樣本串流投影到白化空間。

    y_A = Wᵀa、y_B = WᵀZ_B b、y_C = WᵀZ_C c；Z_Bᵀ W 以低秩因子先算成
    |B|×k，再與稀疏的原始視角相乘。主題情境三個視角共用同一個投影。
    主題情境的平均依文件長度加權，並附上重複詞修正所需的詞頻與權重。

    Raises:
        ValidationError: 維度不符，或社群情境缺少 symm
    """
    if stream.view_a.shape[1] != ctx.dim:
        raise ValidationError(
            f"視角 A 維度 {stream.view_a.shape[1]} 與 W 的 {ctx.dim} 不符"
        )
    if stream.n_samples == 0:
        raise ValidationError("樣本串流為空")

    y_a = record("y_A", _project_rows(stream.view_a, ctx.W, workers))
    if stream.aliased:
        y_b = y_c = y_a
    else:
        if symm is None:
            raise ValidationError("社群情境需要對稱化矩陣 Z_B、Z_C")
        if symm.Z_B.shape != (ctx.dim, stream.view_b.shape[1]):
            raise ValidationError(f"Z_B 形狀 {symm.Z_B.shape} 與視角 B 不符")
        if symm.Z_C.shape != (ctx.dim, stream.view_c.shape[1]):
            raise ValidationError(f"Z_C 形狀 {symm.Z_C.shape} 與視角 C 不符")
        y_b = record("y_B", _project_rows(stream.view_b, _symmetrized_projection(ctx.W, symm.Z_B), workers))
        y_c = record("y_C", _project_rows(stream.view_c, _symmetrized_projection(ctx.W, symm.Z_C), workers))

    weights = stream.doc_weights
    if weights is None:
        mu_a, mu_b, mu_c = y_a.mean(axis=0), y_b.mean(axis=0), y_c.mean(axis=0)
        extra: dict[str, object] = {}
    else:
        mu_a = mu_b = mu_c = (weights.first[:, None] * y_a).mean(axis=0)
        extra = {
            "counts": sp.csr_matrix(stream.view_a),
            "W": ctx.W,
            "pair_weight": weights.pair,
            "triple_weight": weights.triple,
        }
    views = WhitenedViews(
        y_a=y_a,
        y_b=y_b,
        y_c=y_c,
        mu_a=mu_a,
        mu_b=mu_b,
        mu_c=mu_c,
        sample_ids=stream.sample_ids,
        alpha0=stream.alpha0,
        **extra,
    )
    if not (np.all(np.isfinite(y_a)) and np.all(np.isfinite(y_b)) and np.all(np.isfinite(y_c))):
        raise ValidationError("白化視角含非有限值")
    logger.info("[白化] 白化視角：%d 個樣本、k=%d", views.n_samples, views.k)
    return views
