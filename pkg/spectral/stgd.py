"""隨機張量梯度下降（STGD）

對隱式的白化三階張量做 CP 分解。每次更新只用到 k 維向量的內積，
所有 k 個特徵向量以矩陣形式一次更新：

    Φ ← Φ − 3θβ·Φ(G∘G) + β·(y_C(a∘b)ᵀ + y_A(b∘c)ᵀ + y_B(a∘c)ᵀ)

其中 G = ΦᵀΦ，a = Φᵀy_A、b = Φᵀy_B、c = Φᵀy_C。這正是目標函數

    f(Φ) = (θ/2)·Σᵢⱼ⟨φᵢ,φⱼ⟩³ − Σᵢ T(φᵢ,φᵢ,φᵢ)

的梯度下降；shifted 模式的 T 為中心化張量，主題情境另扣除同一個詞
重複出現的貢獻。f 的駐點滿足 ‖φᵢ‖³ = λᵢ/θ。
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from config import (
    BACKTRACK_LIMIT,
    CONTRACTION_CANDIDATES,
    DEFAULT_DECAY_SAMPLES,
    DEFAULT_LR_SCALE,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_THETA,
    DEFAULT_TOL,
    FULL_BATCH_LR_SCALE,
    MIN_INIT_EIGEN_REL,
)
from errors import ConfigurationError, DivergenceError, ValidationError
from spectral.whitening import SampleBatch, WhitenedViews
from utils.text_io import write_csv

logger = logging.getLogger(__name__)

SHIFT_FORMS: tuple[str, ...] = ("centered", "printed")
INIT_METHODS: tuple[str, ...] = ("contraction", "random")
TRACE_HEADER: tuple[str, ...] = ("epoch", "loss", "max_change")

# 平滑損失的指數權重
_SMOOTHING: float = 0.3


# ====================================================================
# 設定與結果
# ====================================================================

@dataclass(frozen=True)
class StgdConfig:
    """STGD 超參數。

    batch 為 None 時每個 epoch 以全部樣本做一次更新，並在目標函數上升時
    將步長減半；給定 batch 時為 mini-batch 隨機梯度。learn_rate_0、
    decay_tau、shifted 為 None 時由 resolve() 補上預設值。

    shift_form 選擇 shifted 模式中 α₀/(α₀+2) 交叉項的符號：centered
    與中心化後的三階動差一致（預設），printed 取相反符號。
    init 為 contraction 時由張量收縮的特徵分解初始化，random 時使用
    initial_phi()。
    """

    theta: float = DEFAULT_THETA
    learn_rate_0: float | None = None
    decay_tau: float | None = None
    max_epochs: int = DEFAULT_MAX_EPOCHS
    batch: int | None = None
    tol: float = DEFAULT_TOL
    seed: int = 0
    shifted: bool | None = None
    shift_form: str = "centered"
    init: str = "contraction"
    trace_path: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.theta > 0:
            raise ConfigurationError(f"theta 必須 > 0: {self.theta}")
        if self.learn_rate_0 is not None and not self.learn_rate_0 > 0:
            raise ConfigurationError(f"learn_rate_0 必須 > 0: {self.learn_rate_0}")
        if self.decay_tau is not None and not self.decay_tau > 0:
            raise ConfigurationError(f"decay_tau 必須 > 0: {self.decay_tau}")
        if self.batch is not None and self.batch < 1:
            raise ConfigurationError(f"batch 必須 >= 1: {self.batch}")
        if self.max_epochs < 0:
            raise ConfigurationError(f"max_epochs 必須 >= 0: {self.max_epochs}")
        if self.tol < 0:
            raise ConfigurationError(f"tol 必須 >= 0: {self.tol}")
        if self.shift_form not in SHIFT_FORMS:
            raise ConfigurationError(
                f"shift_form 必須為 {SHIFT_FORMS} 之一: {self.shift_form!r}"
            )
        if self.init not in INIT_METHODS:
            raise ConfigurationError(f"init 必須為 {INIT_METHODS} 之一: {self.init!r}")

    def full_batch(self, n_samples: int) -> bool:
        return self.batch is None or self.batch >= n_samples

    def resolve(
        self, k: int, n_samples: int, alpha0: float = 0.0, scale: float = 1.0
    ) -> StgdConfig:
        """補齊未指定的預設值。

        scale 為曲率尺度 s = max λ̂^{4/3}·θ^{-1/3}。全批次：β₀ = 0.1/s、
        不衰減；mini-batch：β₀ = 0.01/s、τ = 10·n。α₀ > 0 時啟用 shift。
        """
        if not scale > 0:
            raise ValidationError(f"曲率尺度必須 > 0: {scale}")
        full = self.full_batch(n_samples)
        base = FULL_BATCH_LR_SCALE if full else DEFAULT_LR_SCALE
        return replace(
            self,
            learn_rate_0=(
                self.learn_rate_0 if self.learn_rate_0 is not None else base / scale
            ),
            decay_tau=(
                self.decay_tau if self.decay_tau is not None
                else math.inf if full
                else DEFAULT_DECAY_SAMPLES * max(n_samples, 1)
            ),
            shifted=self.shifted if self.shifted is not None else alpha0 > 0,
        )

    def learning_rate(self, t: int) -> float:
        """βᵗ = β₀ / (1 + t/τ)。"""
        if self.learn_rate_0 is None or self.decay_tau is None:
            raise ConfigurationError("StgdConfig 尚未 resolve()")
        return self.learn_rate_0 / (1.0 + t / self.decay_tau)


@dataclass(frozen=True)
class EigenEstimate:
    """Φ 的第 i 欄為 φᵢ；λᵢ = ‖φᵢ‖³。converged 記錄是否在 max_epochs 內收斂。"""

    Phi: np.ndarray
    Lambda: np.ndarray
    iterations_run: int
    final_loss: float
    converged: bool = True

    @classmethod
    def from_phi(
        cls,
        Phi: np.ndarray,
        iterations_run: int,
        final_loss: float,
        converged: bool = True,
    ) -> EigenEstimate:
        Lambda = np.linalg.norm(Phi, axis=0) ** 3
        return cls(
            Phi=Phi, Lambda=Lambda, iterations_run=iterations_run,
            final_loss=final_loss, converged=converged,
        )

    @property
    def k(self) -> int:
        return self.Phi.shape[1]

    def normalized(self) -> np.ndarray:
        """單位化的特徵向量；零向量欄保持為 0。"""
        norms = np.linalg.norm(self.Phi, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        return self.Phi / safe


@dataclass(frozen=True)
class TensorShift:
    """中心化的修正係數：T_c = E3 + cross·(交叉項) + outer·μ_A⊗μ_B⊗μ_C。

    cross = ∓α₀/(α₀+2)（centered 取 −）、outer = 2α₀²/((α₀+1)(α₀+2))。
    """

    mu_a: np.ndarray
    mu_b: np.ndarray
    mu_c: np.ndarray
    cross: float
    outer: float

    @classmethod
    def build(
        cls,
        means: tuple[np.ndarray, np.ndarray, np.ndarray],
        alpha0: float,
        shift_form: str = "centered",
    ) -> TensorShift:
        mu_a, mu_b, mu_c = (np.asarray(m, dtype=float) for m in means)
        sign = -1.0 if shift_form == "centered" else 1.0
        return cls(
            mu_a, mu_b, mu_c,
            cross=sign * alpha0 / (alpha0 + 2.0),
            outer=2.0 * alpha0 ** 2 / ((alpha0 + 1.0) * (alpha0 + 2.0)),
        )


# ====================================================================
# 隱式張量
# ====================================================================

def _as_batch(sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray], k: int) -> SampleBatch:
    if isinstance(sample, SampleBatch):
        ys = (sample.y_a, sample.y_b, sample.y_c)
    else:
        ys = tuple(np.atleast_2d(np.asarray(y, dtype=float)) for y in sample)
    for y in ys:
        if y.shape[1] != k:
            raise ValidationError(f"樣本維度 {y.shape[1]} 與 k={k} 不符")
    if not (ys[0].shape == ys[1].shape == ys[2].shape):
        raise ValidationError("三個白化視角的形狀不一致")
    if isinstance(sample, SampleBatch):
        return sample
    return SampleBatch(*ys)


def _count_projections(phi: np.ndarray, batch: SampleBatch) -> tuple[np.ndarray, np.ndarray]:
    """P = WΦ（d×k）與 C·P²（b×k）。"""
    P = batch.W @ phi
    CP2 = np.asarray(batch.counts @ (P * P))
    return P, CP2


def tensor_value(
    phi: np.ndarray,
    sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray],
    shift: TensorShift | None = None,
) -> np.ndarray:
    """逐欄的 T(φᵢ,φᵢ,φᵢ)，在批次上取平均（長度 k）。

    主題批次的每份文件貢獻 w₃·(a³ − 3a·cᵀp² + 2cᵀp³)，p = Wφ，
    只計入三個相異位置的詞。
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    batch = _as_batch(sample, phi.shape[0])
    b = batch.size
    A = batch.y_a @ phi

    if batch.corrected:
        w2, w3 = batch.pair_weight, batch.triple_weight
        P, CP2 = _count_projections(phi, batch)
        CP3 = np.asarray(batch.counts @ (P ** 3))
        value = w3 @ (A ** 3 - 3.0 * A * CP2 + 2.0 * CP3) / b
        if shift is not None:
            pair = w2 @ (A * A - CP2) / b                  # φᵀE₂φ
            m = phi.T @ shift.mu_a
            value = value + 3.0 * shift.cross * pair * m + shift.outer * m ** 3
        return value

    B, C = batch.y_b @ phi, batch.y_c @ phi
    value = np.sum(A * B * C, axis=0) / b
    if shift is not None:
        ma, mb, mc = phi.T @ shift.mu_a, phi.T @ shift.mu_b, phi.T @ shift.mu_c
        cross = (
            np.sum(A * B, axis=0) * mc
            + np.sum(A * C, axis=0) * mb
            + np.sum(B * C, axis=0) * ma
        ) / b
        value = value + shift.cross * cross + shift.outer * ma * mb * mc
    return value


def tensor_gradient(
    phi: np.ndarray,
    sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray],
    shift: TensorShift | None = None,
) -> np.ndarray:
    """tensor_value 對每一欄 φᵢ 的梯度（k×k）。"""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    batch = _as_batch(sample, phi.shape[0])
    b = batch.size
    ya = batch.y_a
    A = ya @ phi

    if batch.corrected:
        W, C = batch.W, batch.counts
        w2, w3 = batch.pair_weight, batch.triple_weight
        P, CP2 = _count_projections(phi, batch)
        AW3 = w3[:, None] * A
        g3 = (
            ya.T @ (AW3 * A)
            - ya.T @ (w3[:, None] * CP2)
            - 2.0 * W.T @ (np.asarray(C.T @ AW3) * P)
            + 2.0 * W.T @ (np.asarray(C.T @ w3)[:, None] * P * P)
        )
        grad = 3.0 * g3 / b
        if shift is not None:
            mu = shift.mu_a
            m = phi.T @ mu
            e2 = (ya.T @ (w2[:, None] * A) - W.T @ (np.asarray(C.T @ w2)[:, None] * P)) / b
            pair = w2 @ (A * A - CP2) / b
            grad = grad + 3.0 * shift.cross * (2.0 * e2 * m + np.outer(mu, pair))
            grad = grad + 3.0 * shift.outer * np.outer(mu, m * m)
        return grad

    yb, yc = batch.y_b, batch.y_c
    B, C = yb @ phi, yc @ phi
    grad = (yc.T @ (A * B) + ya.T @ (B * C) + yb.T @ (A * C)) / b
    if shift is not None:
        mu_a, mu_b, mu_c = shift.mu_a, shift.mu_b, shift.mu_c
        ma, mb, mc = phi.T @ mu_a, phi.T @ mu_b, phi.T @ mu_c
        cross = (
            ya.T @ (B * mc + mb * C)
            + yb.T @ (A * mc + ma * C)
            + yc.T @ (A * mb + ma * B)
            + np.outer(mu_a, np.sum(B * C, axis=0))
            + np.outer(mu_b, np.sum(A * C, axis=0))
            + np.outer(mu_c, np.sum(A * B, axis=0))
        ) / b
        outer = np.outer(mu_a, mb * mc) + np.outer(mu_b, ma * mc) + np.outer(mu_c, ma * mb)
        grad = grad + shift.cross * cross + shift.outer * outer
    return grad


def descent_objective(
    phi: np.ndarray,
    sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray],
    theta: float = DEFAULT_THETA,
    shift: TensorShift | None = None,
) -> float:
    """f(Φ) = (θ/2)·Σᵢⱼ⟨φᵢ,φⱼ⟩³ − Σᵢ T(φᵢ,φᵢ,φᵢ)，stgd_step 沿其負梯度前進。"""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    G = phi.T @ phi
    return 0.5 * theta * float(np.sum(G ** 3)) - float(np.sum(tensor_value(phi, sample, shift)))


# ====================================================================
# 損失與單步更新
# ====================================================================

def loss_at_sample(
    v: np.ndarray,
    sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray],
    theta: float = DEFAULT_THETA,
) -> float:
    """θ·Σᵢⱼ⟨vᵢ,vⱼ⟩³ − Σᵢ⟨vᵢ,y_A⟩⟨vᵢ,y_B⟩⟨vᵢ,y_C⟩；多列樣本時取平均。"""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    batch = _as_batch(sample, v.shape[0])
    G = v.T @ v
    ortho = theta * float(np.sum(G ** 3))
    data = np.sum((batch.y_a @ v) * (batch.y_b @ v) * (batch.y_c @ v), axis=1)
    return ortho - float(np.mean(data))


def stgd_step(
    phi: np.ndarray,
    sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: StgdConfig,
    t: int,
    means: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    alpha0: float = 0.0,
    beta: float | None = None,
) -> np.ndarray:
    """對所有 k 個欄位做一次（mini-batch）STGD 更新，回傳新的 Φ。

    sample 可為三個 k 維向量、三個 b×k 的堆疊批次或 SampleBatch；
    批次時資料項取平均。shifted 模式對中心化張量取完整的循環梯度，
    包含 μ_A、μ_B、μ_C 三個方向的交叉項。

    Raises:
        ValidationError: 維度不符，或 shifted 模式缺少 means
        DivergenceError: 更新後出現非有限值
    """
    phi = np.asarray(phi, dtype=float)
    batch = _as_batch(sample, phi.shape[0])
    step = cfg.learning_rate(t) if beta is None else beta
    if step == 0.0:
        return phi.copy()

    shift = None
    if cfg.shifted:
        if means is None:
            raise ValidationError("shifted 模式需要 μ_A、μ_B、μ_C")
        shift = TensorShift.build(means, alpha0, cfg.shift_form)

    G = phi.T @ phi
    ortho = phi @ (G * G)
    updated = phi - 3.0 * cfg.theta * step * ortho + step * tensor_gradient(phi, batch, shift)
    if not np.all(np.isfinite(updated)):
        raise DivergenceError(t)
    return updated


# ====================================================================
# 初始化
# ====================================================================

def initial_phi(k: int, seed: int) -> np.ndarray:
    """高斯矩陣經 QR 正交化後縮放為 1/√k 的欄長。"""
    rng = np.random.default_rng(seed)
    Q, _ = scipy.linalg.qr(rng.standard_normal((k, k)))
    return Q / math.sqrt(k)


def contraction_eigenpairs(
    sample: SampleBatch | tuple[np.ndarray, np.ndarray, np.ndarray],
    k: int,
    seed: int,
    shift: TensorShift | None = None,
    candidates: int = CONTRACTION_CANDIDATES,
) -> tuple[np.ndarray, np.ndarray]:
    """由收縮 M(η) = T(I,I,η) 的特徵向量估計張量成分。

    M(η) 的第 j 欄以 [∇T(eⱼ+η) − ∇T(eⱼ−η)]/12 取得。在數個隨機單位
    向量 η 中取最小相對特徵值間距最大者，回傳 (U, λ̂)：U 的欄已定號
    使 λ̂ᵢ = T(uᵢ,uᵢ,uᵢ) >= 0。
    """
    batch = _as_batch(sample, k)
    rng = np.random.default_rng(seed)
    eye = np.eye(k)
    best_score, best_vecs = -np.inf, eye
    for _ in range(max(candidates, 1)):
        eta = rng.standard_normal(k)
        eta /= np.linalg.norm(eta)
        spread = np.outer(eta, np.ones(k))
        M = (
            tensor_gradient(eye + spread, batch, shift)
            - tensor_gradient(eye - spread, batch, shift)
        ) / 12.0
        vals, vecs = scipy.linalg.eigh(0.5 * (M + M.T))
        spectral = max(float(np.max(np.abs(vals))), np.finfo(float).tiny)
        score = float(np.min(np.diff(vals))) / spectral if k > 1 else 1.0
        if score > best_score:
            best_score, best_vecs = score, vecs
    lam = tensor_value(best_vecs, batch, shift)
    signs = np.where(lam < 0, -1.0, 1.0)
    logger.debug("[STGD] 收縮初始化：相對間距 %.3g、λ̂=%s", best_score, np.abs(lam))
    return best_vecs * signs, np.abs(lam)


def curvature_scale(lam: np.ndarray, theta: float) -> float:
    """s = max λ̂^{4/3}·θ^{-1/3}，即駐點附近徑向曲率的 1/9。"""
    top = float(np.max(lam)) if len(lam) else 0.0
    if not top > 0:
        return 1.0
    return top ** (4.0 / 3.0) * theta ** (-1.0 / 3.0)


# ====================================================================
# 主迴圈
# ====================================================================

def run_stgd(views: WhitenedViews, cfg: StgdConfig) -> EigenEstimate:
    """以 STGD 分解白化張量。

    全批次（預設）時每個 epoch 做一次梯度步，目標函數上升即將步長減半；
    mini-batch 時依種子洗牌後逐批更新。epoch 結束時檢查最大 ℓ∞ 變化量
    是否小於 tol；達到 max_epochs 仍未收斂時 converged 為 False。
    設定 trace_path 時寫出 `epoch,loss,max_change`，loss 為目標函數 f。

    Raises:
        ValidationError: 白化視角為空
        DivergenceError: 更新出現非有限值
    """
    if views.n_samples == 0:
        raise ValidationError("白化視角為空")
    k, n = views.k, views.n_samples
    means = (views.mu_a, views.mu_b, views.mu_c)
    shifted = cfg.shifted if cfg.shifted is not None else views.alpha0 > 0
    shift = TensorShift.build(means, views.alpha0, cfg.shift_form) if shifted else None
    full = views.full()

    U, lam = contraction_eigenpairs(full, k, cfg.seed, shift)
    if cfg.init == "contraction":
        floor = MIN_INIT_EIGEN_REL * float(np.max(lam)) if np.max(lam) > 0 else 1.0
        phi = U * np.cbrt(np.maximum(lam, floor) / cfg.theta)
    else:
        phi = initial_phi(k, cfg.seed)
    cfg = cfg.resolve(k, n, views.alpha0, curvature_scale(lam, cfg.theta))
    whole = cfg.full_batch(n)
    logger.info(
        "[STGD] k=%d、樣本 %d、%s、β₀=%.3g、τ=%.3g、shifted=%s（%s）、初始化 %s",
        k, n, "全批次" if whole else f"batch={cfg.batch}",
        cfg.learn_rate_0, cfg.decay_tau, cfg.shifted, cfg.shift_form, cfg.init,
    )

    rng = np.random.default_rng(cfg.seed)
    trace: list[tuple[int, float, float]] = []
    smoothed: float | None = None
    backtrack = 1.0
    converged = False
    t = 0
    epochs = 0
    loss = descent_objective(phi, full, cfg.theta, shift)
    for epoch in range(1, cfg.max_epochs + 1):
        prev = phi.copy()
        if whole:
            phi, loss, backtrack, stalled = _full_batch_step(
                phi, full, cfg, t, means, views.alpha0, shift, loss, backtrack
            )
            t += n
        else:
            stalled = False
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch):
                idx = order[start:start + cfg.batch]
                phi = stgd_step(
                    phi, views.batch(idx), cfg, t, means=means, alpha0=views.alpha0
                )
                t += len(idx)
            loss = descent_objective(phi, full, cfg.theta, shift)
        epochs = epoch
        change = float(np.max(np.abs(phi - prev)))
        trace.append((epoch, loss, change))

        if smoothed is not None:
            new_smoothed = _SMOOTHING * loss + (1 - _SMOOTHING) * smoothed
            if new_smoothed > smoothed + 1e-12 * max(1.0, abs(smoothed)):
                logger.warning("[STGD] 第 %d 個 epoch 平滑損失上升: %.6g", epoch, new_smoothed)
            smoothed = new_smoothed
        else:
            smoothed = loss
        logger.debug("[STGD] epoch %d：loss=%.6g、max_change=%.3e", epoch, loss, change)
        if change < cfg.tol or stalled:
            converged = True
            logger.info("[STGD] 第 %d 個 epoch 收斂", epoch)
            break
    else:
        if cfg.max_epochs > 0:
            logger.warning("[STGD] 達到 max_epochs=%d 仍未收斂", cfg.max_epochs)

    if cfg.trace_path is not None:
        write_csv(cfg.trace_path, TRACE_HEADER, trace)

    estimate = EigenEstimate.from_phi(
        phi, iterations_run=epochs, final_loss=loss, converged=converged
    )
    zero = np.flatnonzero(estimate.Lambda == 0)
    if zero.size:
        logger.warning("[STGD] 第 %s 個成分的範數為 0（保留）", zero.tolist())
    return estimate


def _full_batch_step(
    phi: np.ndarray,
    full: SampleBatch,
    cfg: StgdConfig,
    t: int,
    means: tuple[np.ndarray, np.ndarray, np.ndarray],
    alpha0: float,
    shift: TensorShift | None,
    loss: float,
    backtrack: float,
) -> tuple[np.ndarray, float, float, bool]:
    """一次全批次梯度步；目標函數上升時步長減半重試。

    Returns:
        (新 Φ, 新目標值, 下一步沿用的步長倍率, 是否已無法下降)
    """
    slack = 1e-12 * max(1.0, abs(loss))
    for _ in range(BACKTRACK_LIMIT):
        beta = cfg.learning_rate(t) * backtrack
        try:
            candidate = stgd_step(phi, full, cfg, t, means=means, alpha0=alpha0, beta=beta)
            new_loss = descent_objective(candidate, full, cfg.theta, shift)
        except DivergenceError:
            new_loss = math.inf
        if new_loss <= loss + slack:
            return candidate, new_loss, backtrack, False
        backtrack *= 0.5
    logger.info("[STGD] 步長減半 %d 次後目標函數仍無法下降", BACKTRACK_LIMIT)
    return phi, loss, backtrack, True
