"""主題管線：動差 → 白化 → STGD → μ̂、α̂。"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import EXACT_WHITEN_MAX_DIM
from cache.stage_cache import StageCache
from datasets.graph_io import Corpus, load_bag_of_words
from pipeline.base_stage import BaseStage
from pipeline.run_config import RunConfig
from spectral.moments import compute_m2_topic, third_moment_sample_stream
from spectral.postprocess import TopicEstimate, recover_topics
from spectral.stgd import EigenEstimate, run_stgd
from spectral.whitening import WhiteningContext, randomized_whiten, whiten_views

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TopicFit:
    estimate: TopicEstimate
    ctx: WhiteningContext
    est: EigenEstimate
    timings: dict[str, float] = field(default_factory=dict)
    results: dict[str, object] = field(default_factory=dict)


class TopicPipeline(BaseStage):
    """LDA 主題估計。"""

    LABEL = "主題"

    def __init__(
        self,
        cfg: RunConfig,
        cache: StageCache | None = None,
        trace_path: Path | None = None,
    ) -> None:
        super().__init__(cfg, cache)
        self.trace_path = trace_path
        self.projection_seed = int(np.random.SeedSequence(cfg.seed).generate_state(3)[1])

    def load_corpus(self) -> Corpus:
        with self.stage("loading"):
            corpus = load_bag_of_words(self.cfg.input)
        self.results["skipped_documents"] = corpus.skipped
        return corpus

    def run(self, corpus: Corpus) -> TopicFit:
        cfg = self.cfg
        with self.stage("preprocessing"):
            moments = compute_m2_topic(
                corpus, cfg.alpha0, cfg.workers, normalize=cfg.normalize_docs
            )
            w_fp = self.whitening_fingerprint("topic")
            ctx = self.cache.load_whitening("topic_whitening", w_fp) if self.cache else None
            if ctx is None:
                ctx = randomized_whiten(
                    moments, cfg.k,
                    method=cfg.whiten_method,
                    seed=self.projection_seed,
                    power_iters=cfg.power_iters,
                    rank_tol=cfg.rank_tol,
                )
                if self.cache:
                    self.cache.save_whitening("topic_whitening", w_fp, ctx)
            if moments.M2.dim <= EXACT_WHITEN_MAX_DIM:
                error = ctx.whitening_error(moments)
                self.results["whitening_error.topic"] = repr(error)
                logger.info("[%s] ‖WᵀM2W − I‖_F = %.3e", self.LABEL, error)
            views = whiten_views(
                ctx, third_moment_sample_stream(corpus, cfg.alpha0, normalize=cfg.normalize_docs),
                workers=cfg.workers,
            )

        with self.stage("stgd"):
            e_fp = self.eigen_fingerprint("topic")
            est = self.cache.load_eigen("topic_eigen", e_fp) if self.cache else None
            if est is None:
                est = run_stgd(views, cfg.stgd_config(self.trace_path))
                if self.cache:
                    self.cache.save_eigen("topic_eigen", e_fp, est)

        with self.stage("postprocessing"):
            estimate = recover_topics(ctx, est)

        self.results.update({
            "n_docs": corpus.n_docs,
            "vocab_size": corpus.vocab_size,
            "zero_columns": estimate.zero_columns,
            "stgd_epochs": est.iterations_run,
            "stgd_converged": est.converged,
            "final_loss": repr(est.final_loss),
        })
        return TopicFit(
            estimate=estimate, ctx=ctx, est=est,
            timings=dict(self.timings), results=dict(self.results),
        )
