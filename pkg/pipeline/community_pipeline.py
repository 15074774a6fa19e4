"""社群管線

分割 → 動差 → 白化 → STGD，共執行兩輪（第二輪交換 X 與 A 的角色），
最後合併成全部節點的成員估計。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import EXACT_WHITEN_MAX_DIM
from cache.stage_cache import StageCache
from datasets.graph_io import NodePartition, SparseGraph, load_edge_list, partition_nodes
from pipeline.base_stage import BaseStage
from pipeline.run_config import RunConfig
from spectral.moments import (
    compute_m2_community,
    compute_symmetrizers,
    third_moment_sample_stream,
)
from spectral.postprocess import CommunityEstimate, recover_memberships
from spectral.stgd import EigenEstimate, run_stgd
from spectral.whitening import WhiteningContext, randomized_whiten, whiten_views

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PassResult:
    """單一輪的白化與特徵估計。"""

    name: str
    partition: NodePartition
    ctx: WhiteningContext
    est: EigenEstimate
    whitening_error: float | None = None


@dataclass(frozen=True)
class CommunityFit:
    estimate: CommunityEstimate
    primary: PassResult
    exchange: PassResult
    timings: dict[str, float] = field(default_factory=dict)
    results: dict[str, object] = field(default_factory=dict)


class CommunityPipeline(BaseStage):
    """MMSB 社群估計。"""

    LABEL = "社群"

    def __init__(
        self,
        cfg: RunConfig,
        cache: StageCache | None = None,
        trace_path: Path | None = None,
    ) -> None:
        super().__init__(cfg, cache)
        self.trace_path = trace_path
        state = np.random.SeedSequence(cfg.seed).generate_state(3)
        self.partition_seed = cfg.seed
        self.pinv_seed = int(state[0])
        self.projection_seed = int(state[1])

    def load_graph(self) -> SparseGraph:
        with self.stage("loading"):
            graph = load_edge_list(
                self.cfg.input,
                directed=self.cfg.directed,
                weighted=self.cfg.weighted,
                bipartite=self.cfg.bipartite,
            )
        self.results["self_loops_dropped"] = graph.self_loops_dropped
        return graph

    def _fit_pass(
        self, graph: SparseGraph, part: NodePartition, name: str, trace: Path | None
    ) -> PassResult:
        cfg = self.cfg
        with self.stage("preprocessing"):
            symm = compute_symmetrizers(
                graph, part, cfg.k,
                method=cfg.pinv_method,
                seed=self.pinv_seed,
                power_iters=cfg.power_iters,
                rank_tol=cfg.rank_tol,
            )
            moments = compute_m2_community(graph, part, symm, cfg.alpha0, cfg.workers)
            w_fp = self.whitening_fingerprint(name)
            ctx = self.cache.load_whitening(f"{name}_whitening", w_fp) if self.cache else None
            if ctx is None:
                ctx = randomized_whiten(
                    moments, cfg.k,
                    method=cfg.whiten_method,
                    seed=self.projection_seed,
                    power_iters=cfg.power_iters,
                    rank_tol=cfg.rank_tol,
                )
                if self.cache:
                    self.cache.save_whitening(f"{name}_whitening", w_fp, ctx)
            error = None
            if moments.M2.dim <= EXACT_WHITEN_MAX_DIM:
                error = ctx.whitening_error(moments)
                logger.info("[%s] %s ‖WᵀM2W − I‖_F = %.3e", self.LABEL, name, error)
            stream = third_moment_sample_stream(graph, cfg.alpha0, part)
            views = whiten_views(ctx, stream, symm, cfg.workers)

        with self.stage("stgd"):
            e_fp = self.eigen_fingerprint(name)
            est = self.cache.load_eigen(f"{name}_eigen", e_fp) if self.cache else None
            if est is None:
                est = run_stgd(views, cfg.stgd_config(trace))
                if self.cache:
                    self.cache.save_eigen(f"{name}_eigen", e_fp, est)
        return PassResult(name, part, ctx, est, error)

    def run(self, graph: SparseGraph) -> CommunityFit:
        """Raises:
            StageError: 任一階段失敗（訊息帶階段名稱）
        """
        cfg = self.cfg
        with self.stage("preprocessing"):
            part = partition_nodes(graph, tuple(cfg.partition), self.partition_seed, cfg.k)
        primary = self._fit_pass(graph, part, "primary", self.trace_path)
        exchange = self._fit_pass(graph, part.swapped(), "exchange", None)

        with self.stage("postprocessing"):
            estimate = recover_memberships(
                graph, part, primary.ctx, primary.est,
                threshold=cfg.threshold,
                exchange=(exchange.ctx, exchange.est),
            )

        self.results.update({
            "n_nodes": graph.n_nodes,
            "nnz": graph.nnz,
            "partition_sizes": " ".join(f"{k}={v}" for k, v in part.sizes().items()),
            "zero_columns": estimate.zero_columns,
            "stgd_epochs": f"{primary.est.iterations_run},{exchange.est.iterations_run}",
            "stgd_converged": f"{primary.est.converged},{exchange.est.converged}",
            "final_loss": f"{primary.est.final_loss!r},{exchange.est.final_loss!r}",
        })
        for result in (primary, exchange):
            if result.whitening_error is not None:
                self.results[f"whitening_error.{result.name}"] = repr(result.whitening_error)
        return CommunityFit(
            estimate=estimate,
            primary=primary,
            exchange=exchange,
            timings=dict(self.timings),
            results=dict(self.results),
        )
