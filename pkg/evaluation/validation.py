"""統計驗證

以 p 值配對估計社群與真實社群，計算回收率、平均誤差、橋接度，
另提供重疊與非重疊 NMI 供比較。
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc, entr

from config import (
    BRIDGENESS_NAME,
    DEFAULT_P_THRESHOLD,
    PVALUES_NAME,
    REPORT_NAME,
    SWEEP_NAME,
)
from errors import ValidationError
from spectral.postprocess import apply_threshold
from utils.text_io import write_csv, write_key_values

logger = logging.getLogger(__name__)

_LOG2 = np.log(2.0)


# ====================================================================
# p 值
# ====================================================================

@dataclass(frozen=True)
class PvalMatrix:
    """k×k̂ 的右尾 p 值（列為真實社群、欄為估計社群）。"""

    values: np.ndarray
    t_stats: np.ndarray
    n_samples: int
    zero_variance: np.ndarray = field(repr=False)   # k×k̂ 布林旗標

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def student_t_sf(t: np.ndarray | float, df: float) -> np.ndarray:
    """Student t 分佈的右尾機率 P(T > t)，以正則化不完全 beta 函數計算。

    t ≥ 0 時為 ½·I_{df/(df+t²)}(df/2, ½)，t < 0 時取補數；±∞ 分別得 0、1。
    """
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        x = df / (df + t * t)
    x = np.where(np.isinf(t), 0.0, x)
    tail = 0.5 * betainc(0.5 * df, 0.5, x)
    return np.where(t >= 0, tail, 1.0 - tail)


def pvalue_matrix(Pi_true: np.ndarray, Pi_hat: np.ndarray) -> PvalMatrix:
    """以 Pearson 相關的 t 統計量檢定每對 (真實 i, 估計 j)。

    T = ρ√(n−2)/√(1−ρ²)，自由度 n−2。任一列變異數為 0 時相關性無定義，
    該格 p 值設為 1 並標記。

    Raises:
        ValidationError: 節點數不一致或 n < 3
    """
    Pi_true = np.atleast_2d(np.asarray(Pi_true, dtype=float))
    Pi_hat = np.atleast_2d(np.asarray(Pi_hat, dtype=float))
    n = Pi_true.shape[1]
    if Pi_hat.shape[1] != n:
        raise ValidationError(f"節點數不一致: {n} vs {Pi_hat.shape[1]}")
    if n < 3:
        raise ValidationError(f"p 值檢定需要 n >= 3: {n}")

    T_c = Pi_true - Pi_true.mean(axis=1, keepdims=True)
    H_c = Pi_hat - Pi_hat.mean(axis=1, keepdims=True)
    t_norm = np.linalg.norm(T_c, axis=1)
    h_norm = np.linalg.norm(H_c, axis=1)
    zero_var = (t_norm[:, None] == 0) | (h_norm[None, :] == 0)
    denom = np.where(zero_var, 1.0, np.outer(t_norm, h_norm))
    rho = np.clip((T_c @ H_c.T) / denom, -1.0, 1.0)
    rho = np.where(zero_var, 0.0, rho)

    df = n - 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = rho * np.sqrt(df) / np.sqrt(1.0 - rho * rho)
    t_stats = np.where(np.abs(rho) >= 1.0, np.sign(rho) * np.inf, t_stats)
    values = np.clip(student_t_sf(t_stats, df), 0.0, 1.0)
    values = np.where(zero_var, 1.0, values)
    if zero_var.any():
        logger.warning("[驗證] %d 個配對因變異數為 0 而設 p=1", int(zero_var.sum()))
    return PvalMatrix(values=values, t_stats=t_stats, n_samples=n, zero_variance=zero_var)


def benjamini_hochberg(p_values: np.ndarray) -> np.ndarray:
    """Benjamini–Hochberg 調整後的 p 值，形狀與輸入相同。"""
    p = np.asarray(p_values, dtype=float)
    flat = p.ravel()
    m = flat.size
    if m == 0:
        return p.copy()
    order = np.argsort(flat)
    ranked = flat[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.clip(ranked, 0.0, 1.0)
    return adjusted.reshape(p.shape)


# ====================================================================
# 配對圖與指標
# ====================================================================

@dataclass(frozen=True)
class MatchGraph:
    """二部配對圖，邊為 (真實社群 i, 估計社群 j)。"""

    edges: frozenset[tuple[int, int]]
    p_threshold: float
    k: int
    k_hat: int
    fdr_q: float | None = None

    def degree(self, i: int) -> int:
        return sum(1 for a, _ in self.edges if a == i)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def build_match_graph(
    pvals: PvalMatrix,
    p_threshold: float = DEFAULT_P_THRESHOLD,
    fdr_q: float | None = None,
) -> MatchGraph:
    """p 值 ≤ p_threshold 的配對成為邊；設定 fdr_q 時改用 BH 調整後 ≤ fdr_q。

    Raises:
        ValidationError: p_threshold 或 fdr_q 不在 (0, 1)
    """
    if not 0.0 < p_threshold < 1.0:
        raise ValidationError(f"p_threshold 必須介於 (0, 1): {p_threshold}")
    if fdr_q is not None:
        if not 0.0 < fdr_q < 1.0:
            raise ValidationError(f"fdr_q 必須介於 (0, 1): {fdr_q}")
        mask = benjamini_hochberg(pvals.values) <= fdr_q
    else:
        mask = pvals.values <= p_threshold
    rows, cols = np.nonzero(mask)
    k, k_hat = pvals.shape
    edges = frozenset((int(i), int(j)) for i, j in zip(rows, cols))
    logger.debug("[驗證] 配對圖 %d 條邊", len(edges))
    return MatchGraph(edges=edges, p_threshold=p_threshold, k=k, k_hat=k_hat, fdr_q=fdr_q)


def recovery_ratio(match: MatchGraph, k: int) -> float:
    """至少有一條配對邊的真實社群比例。"""
    if k < 1:
        raise ValidationError(f"k 必須 >= 1: {k}")
    matched = {i for i, _ in match.edges}
    return len(matched) / k


def average_error(
    match: MatchGraph, Pi_true: np.ndarray, Pi_hat: np.ndarray
) -> float:
    """(1/k)·Σ_{(i,j)∈E} (1/n)·Σₓ|Π̂ⱼ(x) − Πᵢ(x)|；錯誤配對過多時可超過 1。"""
    Pi_true = np.atleast_2d(np.asarray(Pi_true, dtype=float))
    Pi_hat = np.atleast_2d(np.asarray(Pi_hat, dtype=float))
    if Pi_true.shape[1] != Pi_hat.shape[1]:
        raise ValidationError("Π 與 Π̂ 的節點數不一致")
    total = sum(
        float(np.mean(np.abs(Pi_hat[j] - Pi_true[i]))) for i, j in match.edges
    )
    return total / Pi_true.shape[0]


def bridgeness(
    Pi_hat: np.ndarray, degrees: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """每個節點的橋接度 b 與度數校正橋接度 B = D·b。

    b = 1 − √(k̂/(k̂−1)·Σⱼ(Π̂ⱼ − 1/k̂)²)，截斷到 [0, 1]。

    Raises:
        ValidationError: k̂ = 1 或維度不符
    """
    Pi_hat = np.atleast_2d(np.asarray(Pi_hat, dtype=float))
    k_hat, n = Pi_hat.shape
    if k_hat < 2:
        raise ValidationError("k̂ = 1 時橋接度無定義")
    degrees = np.asarray(degrees, dtype=float).ravel()
    if degrees.size != n:
        raise ValidationError(f"度數向量長度 {degrees.size} 與節點數 {n} 不符")
    spread = np.sum((Pi_hat - 1.0 / k_hat) ** 2, axis=0)
    b = np.clip(1.0 - np.sqrt(k_hat / (k_hat - 1.0) * spread), 0.0, 1.0)
    return b, degrees * b


# ====================================================================
# NMI
# ====================================================================

def binary_entropy(p: np.ndarray | float) -> np.ndarray:
    """Bernoulli(p) 的熵（bits）。"""
    p = np.asarray(p, dtype=float)
    return (entr(p) + entr(1.0 - p)) / _LOG2


@dataclass(frozen=True)
class NmiResult:
    value: float
    degenerate_true: tuple[int, ...] = ()
    degenerate_hat: tuple[int, ...] = ()


def _normalized_conditional(
    X: np.ndarray, Y: np.ndarray
) -> tuple[float, tuple[int, ...]]:
    """(1/|X|)·Σ_x min_y H(x|y)/H(x)；H(x) = 0 的列貢獻 0 並回報索引。"""
    n = X.shape[1]
    xf, yf = X.astype(float), Y.astype(float)
    n11 = xf @ yf.T
    x_cnt = xf.sum(axis=1)[:, None]
    y_cnt = yf.sum(axis=1)[None, :]
    n10 = x_cnt - n11
    n01 = y_cnt - n11
    n00 = n - n11 - n10 - n01
    joint = sum(entr(c / n) for c in (n11, n10, n01, n00)) / _LOG2
    h_y = binary_entropy(y_cnt / n)
    h_x = binary_entropy(x_cnt.ravel() / n)
    cond = np.clip(joint - h_y, 0.0, None)           # H(x|y)
    best = cond.min(axis=1)
    degenerate = tuple(int(i) for i in np.flatnonzero(h_x == 0))
    ratios = np.where(h_x > 0, best / np.where(h_x > 0, h_x, 1.0), 0.0)
    return float(np.mean(np.clip(ratios, 0.0, 1.0))), degenerate


def nmi_overlap(
    Pi_true: np.ndarray, Pi_hat: np.ndarray, threshold: float = 0.0
) -> NmiResult:
    """重疊社群 NMI：1 − ½[H(Π|Π̂)_norm + H(Π̂|Π)_norm]。

    兩個矩陣先二值化（> threshold 為 1）。每個方向以被條件化一方的熵
    正規化，結果位於 [0, 1]。社群大小不同時此分數會同等懲罰稀疏與
    稠密社群，僅供比較。
    """
    X = np.atleast_2d(np.asarray(Pi_true)) > threshold
    Y = np.atleast_2d(np.asarray(Pi_hat)) > threshold
    if X.shape[1] != Y.shape[1]:
        raise ValidationError("Π 與 Π̂ 的節點數不一致")
    h_xy, deg_x = _normalized_conditional(X, Y)
    h_yx, deg_y = _normalized_conditional(Y, X)
    if deg_x or deg_y:
        logger.warning("[驗證] 熵為 0 的社群：真實 %s、估計 %s", deg_x, deg_y)
    value = float(np.clip(1.0 - 0.5 * (h_xy + h_yx), 0.0, 1.0))
    return NmiResult(value=value, degenerate_true=deg_x, degenerate_hat=deg_y)


def hard_labels(Pi: np.ndarray) -> np.ndarray:
    """每個節點取成員度最大的社群。"""
    return np.argmax(np.atleast_2d(np.asarray(Pi)), axis=0)


def nmi_block(labels_true: np.ndarray, labels_hat: np.ndarray) -> float:
    """非重疊 NMI：(H(X)+H(Y)−H(X,Y)) / ((H(X)+H(Y))/2)。兩者皆為常數時回傳 1。"""
    a = np.asarray(labels_true).ravel()
    b = np.asarray(labels_hat).ravel()
    if a.size != b.size:
        raise ValidationError("兩組標籤長度不一致")
    if a.size == 0:
        raise ValidationError("標籤為空")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= a.size
    h_a = float(entr(joint.sum(axis=1)).sum())
    h_b = float(entr(joint.sum(axis=0)).sum())
    h_ab = float(entr(joint).sum())
    if h_a + h_b == 0:
        return 1.0
    return float(np.clip((h_a + h_b - h_ab) / (0.5 * (h_a + h_b)), 0.0, 1.0))


# ====================================================================
# 報告
# ====================================================================

@dataclass(frozen=True)
class SweepRow:
    threshold: float
    recovery_ratio: float
    avg_error: float
    n_edges: int


@dataclass(frozen=True)
class ValidationReport:
    pvals: PvalMatrix
    match: MatchGraph
    recovery_ratio: float
    avg_error: float
    bridgeness: np.ndarray
    dc_bridgeness: np.ndarray
    nmi: NmiResult
    nmi_block: float

    @property
    def avg_bridgeness(self) -> float:
        return float(np.mean(self.bridgeness))

    @property
    def avg_dc_bridgeness(self) -> float:
        return float(np.mean(self.dc_bridgeness))

    def summary(self) -> dict[str, object]:
        k, k_hat = self.pvals.shape
        return {
            "k": k,
            "k_hat": k_hat,
            "n_nodes": self.pvals.n_samples,
            "p_threshold": self.match.p_threshold,
            "fdr_q": self.match.fdr_q if self.match.fdr_q is not None else "none",
            "n_edges": len(self.match.edges),
            "edges": " ".join(f"{i}-{j}" for i, j in self.match.sorted_edges()),
            "recovery_ratio": f"{self.recovery_ratio:.6f}",
            "avg_error": f"{self.avg_error:.6f}",
            "nmi_overlap": f"{self.nmi.value:.6f}",
            "nmi_block": f"{self.nmi_block:.6f}",
            "avg_bridgeness": f"{self.avg_bridgeness:.6f}",
            "avg_dc_bridgeness": f"{self.avg_dc_bridgeness:.6f}",
            "zero_variance_pairs": int(self.pvals.zero_variance.sum()),
        }


def build_report(
    Pi_true: np.ndarray,
    Pi_hat: np.ndarray,
    degrees: np.ndarray,
    p_threshold: float = DEFAULT_P_THRESHOLD,
    fdr_q: float | None = None,
    nmi_threshold: float = 0.0,
) -> ValidationReport:
    pvals = pvalue_matrix(Pi_true, Pi_hat)
    match = build_match_graph(pvals, p_threshold, fdr_q)
    k = pvals.shape[0]
    b, dc_b = bridgeness(Pi_hat, degrees)
    report = ValidationReport(
        pvals=pvals,
        match=match,
        recovery_ratio=recovery_ratio(match, k),
        avg_error=average_error(match, Pi_true, Pi_hat),
        bridgeness=b,
        dc_bridgeness=dc_b,
        nmi=nmi_overlap(Pi_true, Pi_hat, nmi_threshold),
        nmi_block=nmi_block(hard_labels(Pi_true), hard_labels(Pi_hat)),
    )
    logger.info(
        "[驗證] 回收率 %.3f、平均誤差 %.4f、配對 %d 條",
        report.recovery_ratio, report.avg_error, len(match.edges),
    )
    return report


def threshold_sweep(
    raw: np.ndarray,
    Pi_true: np.ndarray,
    thresholds: Sequence[float],
    p_threshold: float = DEFAULT_P_THRESHOLD,
    fdr_q: float | None = None,
) -> list[SweepRow]:
    """對每個門檻重新截斷 raw 成員矩陣，回報回收率與平均誤差的取捨。"""
    rows: list[SweepRow] = []
    k = np.atleast_2d(Pi_true).shape[0]
    for threshold in thresholds:
        Pi_hat, _ = apply_threshold(raw, threshold)
        match = build_match_graph(pvalue_matrix(Pi_true, Pi_hat), p_threshold, fdr_q)
        rows.append(SweepRow(
            threshold=float(threshold),
            recovery_ratio=recovery_ratio(match, k),
            avg_error=average_error(match, Pi_true, Pi_hat),
            n_edges=len(match.edges),
        ))
    return rows


def write_report(
    report: ValidationReport,
    out_dir: str | Path,
    node_labels: Sequence[str] | None = None,
    sweep: Sequence[SweepRow] | None = None,
) -> Path:
    """寫出 report.txt（key: value）、p 值 CSV、橋接度 CSV 與門檻掃描 CSV。"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / REPORT_NAME
    write_key_values(path, report.summary())
    k, k_hat = report.pvals.shape
    write_csv(
        out / PVALUES_NAME,
        ["true", *[f"hat_{j}" for j in range(k_hat)]],
        ([i, *[f"{v:.6g}" for v in report.pvals.values[i]]] for i in range(k)),
    )
    labels = node_labels if node_labels is not None else [str(x) for x in range(len(report.bridgeness))]
    write_csv(
        out / BRIDGENESS_NAME,
        ["node", "bridgeness", "dc_bridgeness"],
        (
            [labels[x], f"{report.bridgeness[x]:.6f}", f"{report.dc_bridgeness[x]:.6f}"]
            for x in range(len(report.bridgeness))
        ),
    )
    if sweep:
        write_sweep(out / SWEEP_NAME, sweep)
    logger.info("[驗證] 報告已寫入 %s", path)
    return path


def write_sweep(path: str | Path, rows: Sequence[SweepRow]) -> None:
    write_csv(
        path,
        ["threshold", "recovery_ratio", "avg_error", "n_edges"],
        ([r.threshold, f"{r.recovery_ratio:.6f}", f"{r.avg_error:.6f}", r.n_edges] for r in rows),
    )
