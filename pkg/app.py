"""重疊社群／主題張量分解：命令列主介面

子命令：
- generate：產生合成圖或語料與真實參數
- fit：執行完整管線並寫出估計與 manifest
- validate：以 p 值配對比較估計與真實參數
- report：輸出人類可讀的執行摘要

僅包含命令列邏輯，演算法皆由各模組提供。
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from cache.stage_cache import StageCache
from config import (
    ALPHA_HAT_NAME,
    ALPHA_TRUE_NAME,
    CORPUS_NAME,
    GRAPH_NAME,
    MANIFEST_NAME,
    MU_HAT_NAME,
    MU_TRUE_NAME,
    P_TRUE_NAME,
    PI_HAT_NAME,
    PI_TRUE_NAME,
    RAW_PI_NAME,
    REMAP_NAME,
    REPORT_NAME,
    SWEEP_NAME,
    TRACE_NAME,
    setup_logging,
)
from datasets.graph_io import load_edge_list, write_bag_of_words, write_edge_list, write_remap
from datasets.synthgen import (
    DirichletSpec,
    GroundTruth,
    connectivity_matrix,
    generate_lda,
    generate_mmsb,
    random_topics,
    sample_memberships,
)
from errors import TensorCommError, ValidationError
from evaluation.validation import build_report, threshold_sweep, write_report, write_sweep
from pipeline.community_pipeline import CommunityPipeline
from pipeline.run_config import RunConfig
from pipeline.topic_pipeline import TopicPipeline
from utils.text_io import (
    read_dense,
    read_key_values,
    read_triples,
    read_vector,
    write_dense,
    write_key_values,
    write_triples,
    write_vector,
)

logger = logging.getLogger(__name__)

# argparse 目的地 → 設定鍵
_FLAG_KEYS: dict[str, str] = {
    "mode": "mode",
    "k": "k",
    "alpha0": "alpha0",
    "seed": "seed",
    "workers": "workers",
    "input": "input",
    "output": "output",
    "truth": "truth",
    "threshold": "threshold",
    "threshold_sweep": "threshold_sweep",
}


# ====================================================================
# 共用工具
# ====================================================================

def _overrides(args: argparse.Namespace) -> dict[str, str]:
    """收集命令列旗標（含 --set KEY=VALUE）為設定覆寫；具名旗標優先。"""
    values: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set 需要 KEY=VALUE 格式: {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[key] = str(value)
    return values


def _ensure_writable(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"輸出檔已存在（使用 --force 覆寫）: {', '.join(existing)}")


def _sorted_ids(ids: set[str]) -> list[str]:
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def _triples_to_matrix(
    triples: list[tuple[int, str, float]],
    node_ids: Sequence[str],
    k: int | None = None,
) -> np.ndarray:
    """將 `community node weight` 三元組依 node_ids 的順序組成 k×n 矩陣。

    不在 node_ids 中的節點略過；沒有任何三元組的節點為全 0 欄。
    """
    index = {node: i for i, node in enumerate(node_ids)}
    k = 1 + max((r for r, _, _ in triples), default=-1) if k is None else k
    M = np.zeros((k, len(node_ids)))
    for r, node, w in triples:
        if not 0 <= r < k:
            raise ValidationError(f"社群索引 {r} 超出 [0, {k})")
        col = index.get(node)
        if col is not None:
            M[r, col] = w
    return M


def _align_columns(
    matrix: np.ndarray, ids: Sequence[str], node_ids: Sequence[str]
) -> np.ndarray:
    """依外部 ID 將 matrix 的欄重新排成 node_ids 的順序，缺少的節點補 0。"""
    col = {node: i for i, node in enumerate(ids)}
    aligned = np.zeros((matrix.shape[0], len(node_ids)))
    for j, node in enumerate(node_ids):
        if node in col:
            aligned[:, j] = matrix[:, col[node]]
    return aligned


def _read_true_memberships(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """讀取真實 Π：稠密 column-major（檔頭 `k n`，第 j 欄為節點 j）或三元組。

    Returns:
        (k×n 的 Π, 對應的節點 ID)
    """
    with open(path, encoding="utf-8") as f:
        first = next((ln for ln in f if ln.strip() and not ln.startswith("#")), "")
    if len(first.split()) == 2:
        Pi = read_dense(path)
        return Pi, [str(j) for j in range(Pi.shape[1])]
    triples = read_triples(path)
    node_ids = _sorted_ids({node for _, node, _ in triples})
    return _triples_to_matrix(triples, node_ids), node_ids


def _read_remap(path: Path) -> list[str]:
    pairs = read_key_values(path, separator=" ")
    return [pairs[str(i)] for i in range(len(pairs))]


def _write_manifest(
    path: Path, cfg: RunConfig, timings: dict[str, float], results: dict[str, object]
) -> None:
    values: dict[str, object] = dict(cfg.resolved())
    values.update({f"timing.{name}": f"{sec:.6f}" for name, sec in timings.items()})
    values.update({f"result.{key}": value for key, value in results.items()})
    write_key_values(path, values, separator=" = ")


# ====================================================================
# generate
# ====================================================================

def cmd_generate(args: argparse.Namespace) -> int:
    """產生合成資料與真實參數；輸出已存在時需要 --force。"""
    cfg = RunConfig.load(args.config, _overrides(args))
    out = Path(cfg.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    member_seed, data_seed = (
        int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(2)
    )
    spec = DirichletSpec.symmetric(cfg.k, cfg.alpha0)

    if cfg.mode == "community":
        targets = [out / GRAPH_NAME, out / PI_TRUE_NAME, out / P_TRUE_NAME, out / ALPHA_TRUE_NAME]
        _ensure_writable(targets, args.force)
        Pi = sample_memberships(spec, cfg.n_nodes, member_seed)
        truth = GroundTruth(Pi=Pi, P=connectivity_matrix(cfg.k, cfg.p_in, cfg.p_out))
        graph = generate_mmsb(truth, cfg.model, data_seed, directed=cfg.directed)
        write_edge_list(graph, targets[0])
        write_dense(targets[1], Pi)
        write_dense(targets[2], truth.P)
        write_vector(targets[3], spec.alpha)
        logger.info("[產生] 已寫出 %d 個儲存元素與真實參數到 %s", graph.nnz, out)
    else:
        targets = [out / CORPUS_NAME, out / MU_TRUE_NAME, out / ALPHA_TRUE_NAME]
        _ensure_writable(targets, args.force)
        mu = random_topics(cfg.vocab_size, cfg.k, member_seed, cfg.topic_concentration)
        corpus = generate_lda(GroundTruth(mu=mu), spec, cfg.n_docs, cfg.doc_length, data_seed)
        write_bag_of_words(corpus, targets[0])
        write_dense(targets[1], mu)
        write_vector(targets[2], spec.alpha)
        logger.info("[產生] 已寫出 %d 份文件與真實參數到 %s", corpus.n_docs, out)
    return 0


# ====================================================================
# fit
# ====================================================================

def cmd_fit(args: argparse.Namespace) -> int:
    """執行管線，寫出 Π̂ 或 μ̂、α̂ 與 manifest。"""
    cfg = RunConfig.load(args.config, _overrides(args))
    out = Path(cfg.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    _ensure_writable([out / MANIFEST_NAME], args.force or args.resume)

    cache = StageCache(out, resume=args.resume)
    trace = Path(cfg.trace) if cfg.trace else (out / TRACE_NAME if args.trace else None)

    if cfg.mode == "community":
        pipe = CommunityPipeline(cfg, cache, trace)
        graph = pipe.load_graph()
        fit = pipe.run(graph)
        ids = graph.external_ids()
        results = dict(fit.results)
        results["pi_hat_entries"] = write_triples(out / PI_HAT_NAME, fit.estimate.Pi_hat, ids)
        write_dense(out / RAW_PI_NAME, fit.estimate.raw)
        write_remap(graph, out / REMAP_NAME)
        for threshold in cfg.threshold_sweep:
            swept = fit.estimate.with_threshold(threshold)
            write_triples(out / f"pi_hat_t{threshold:g}.txt", swept.Pi_hat, ids)
        if cfg.threshold_sweep and cfg.truth:
            Pi_true, node_ids = _read_true_memberships(cfg.truth)
            rows = threshold_sweep(
                _align_columns(fit.estimate.raw, ids, node_ids),
                Pi_true,
                cfg.threshold_sweep, cfg.p_threshold, cfg.fdr_q,
            )
            write_sweep(out / SWEEP_NAME, rows)
    else:
        pipe = TopicPipeline(cfg, cache, trace)
        corpus = pipe.load_corpus()
        fit = pipe.run(corpus)
        write_dense(out / MU_HAT_NAME, fit.estimate.mu_hat)
        results = dict(fit.results)

    write_vector(out / ALPHA_HAT_NAME, fit.estimate.alpha_hat)
    results["alpha_hat"] = " ".join(f"{a:.6f}" for a in fit.estimate.alpha_hat)
    _write_manifest(out / MANIFEST_NAME, cfg, fit.timings, results)
    logger.info("[fit] 完成，輸出目錄 %s", out)
    return 0


# ====================================================================
# validate
# ====================================================================

def _community_inputs(cfg: RunConfig, est_dir: Path):
    Pi_true, node_ids = _read_true_memberships(cfg.truth)
    k_hat = len(read_vector(est_dir / ALPHA_HAT_NAME))
    Pi_hat = _triples_to_matrix(read_triples(est_dir / PI_HAT_NAME), node_ids, k_hat)

    if cfg.input and Path(cfg.input).exists():
        graph = load_edge_list(cfg.input, cfg.directed, cfg.weighted, cfg.bipartite)
        degrees = _align_columns(graph.degrees()[None, :], graph.external_ids(), node_ids)[0]
    else:
        logger.warning("[驗證] 找不到輸入圖，度數校正橋接度以度數 1 計算")
        degrees = np.ones(len(node_ids))

    raw = None
    if (est_dir / RAW_PI_NAME).exists() and (est_dir / REMAP_NAME).exists():
        raw = _align_columns(
            read_dense(est_dir / RAW_PI_NAME), _read_remap(est_dir / REMAP_NAME), node_ids
        )
    return Pi_true, Pi_hat, degrees, node_ids, raw


def cmd_validate(args: argparse.Namespace) -> int:
    """比較估計與真實參數，寫出 report.txt 與附屬 CSV。"""
    est_dir = Path(args.estimate)
    manifest = est_dir / MANIFEST_NAME
    base = args.config or (manifest if manifest.exists() else None)
    overrides = _overrides(args)
    overrides["output"] = str(est_dir)
    cfg = RunConfig.load(base, overrides)
    if not cfg.truth:
        raise ValidationError("validate 需要 --truth")

    sweep = None
    if cfg.mode == "community":
        Pi_true, Pi_hat, degrees, node_ids, raw = _community_inputs(cfg, est_dir)
        if cfg.threshold_sweep and raw is not None:
            sweep = threshold_sweep(raw, Pi_true, cfg.threshold_sweep, cfg.p_threshold, cfg.fdr_q)
    else:
        Pi_true = read_dense(cfg.truth).T
        Pi_hat = read_dense(est_dir / MU_HAT_NAME).T
        if Pi_true.shape[1] != Pi_hat.shape[1]:
            raise ValidationError(
                f"詞彙大小不一致: 真實 {Pi_true.shape[1]}、估計 {Pi_hat.shape[1]}"
            )
        node_ids = [str(w) for w in range(1, Pi_true.shape[1] + 1)]
        degrees = np.ones(Pi_true.shape[1])

    report = build_report(
        Pi_true, Pi_hat, degrees,
        p_threshold=cfg.p_threshold,
        fdr_q=cfg.fdr_q,
        nmi_threshold=cfg.threshold,
    )
    write_report(report, est_dir, node_ids, sweep)
    return 0


# ====================================================================
# report
# ====================================================================

def cmd_report(args: argparse.Namespace) -> int:
    """輸出 manifest 與驗證報告的摘要。"""
    directory = Path(args.directory)
    manifest = read_key_values(directory / MANIFEST_NAME, separator="=")
    lines = [f"# 執行摘要：{directory}"]
    for key in ("mode", "k", "alpha0", "seed", "workers", "input"):
        lines.append(f"{key}: {manifest.get(key, '')}")
    lines.append("")
    lines.append("## 各階段耗時（秒）")
    for key, value in manifest.items():
        if key.startswith("timing."):
            lines.append(f"{key[len('timing.'):]}: {value}")
    lines.append("")
    lines.append("## 結果")
    for key, value in manifest.items():
        if key.startswith("result."):
            lines.append(f"{key[len('result.'):]}: {value}")

    report_path = directory / REPORT_NAME
    if report_path.exists():
        report = read_key_values(report_path)
        lines.append("")
        lines.append("## 驗證")
        for key in (
            "recovery_ratio", "avg_error", "n_edges", "nmi_overlap", "nmi_block",
            "avg_bridgeness", "avg_dc_bridgeness",
        ):
            if key in report:
                lines.append(f"{key}: {report[key]}")
    print("\n".join(lines))
    return 0


# ====================================================================
# 主程式
# ====================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value 設定檔（manifest 亦可）")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="覆寫任一設定鍵")
    common.add_argument("--mode", choices=("community", "topic"))
    common.add_argument("--k", type=int)
    common.add_argument("--alpha0", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--verbose", action="store_true", help="輸出 DEBUG 日誌")

    parser = argparse.ArgumentParser(
        prog="tensorcomm", description="以張量動差法估計重疊社群與主題模型"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="產生合成資料")
    gen.add_argument("--output")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    fit = sub.add_parser("fit", parents=[common], help="執行估計管線")
    fit.add_argument("--input")
    fit.add_argument("--output")
    fit.add_argument("--truth", help="門檻掃描時用於計算回收率的真實 Π")
    fit.add_argument("--threshold", type=float)
    fit.add_argument("--threshold-sweep", dest="threshold_sweep", help="以逗號分隔的門檻列表")
    fit.add_argument("--trace", action="store_true", help=f"寫出 {TRACE_NAME}")
    fit.add_argument("--resume", action="store_true", help="沿用輸出目錄中的階段快取")
    fit.add_argument("--force", action="store_true")
    fit.set_defaults(func=cmd_fit)

    val = sub.add_parser("validate", parents=[common], help="驗證估計結果")
    val.add_argument("--estimate", required=True, help="fit 的輸出目錄")
    val.add_argument("--truth")
    val.add_argument("--input")
    val.add_argument("--threshold", type=float)
    val.add_argument("--threshold-sweep", dest="threshold_sweep")
    val.set_defaults(func=cmd_validate)

    rep = sub.add_parser("report", help="輸出執行摘要")
    rep.add_argument("directory")
    rep.add_argument("--verbose", action="store_true")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except (TensorCommError, OSError) as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
