"""pytest 設定：將專案根目錄加入 Python path，並提供共用的小型合成資料"""
import sys
from pathlib import Path

import numpy as np
import pytest

# 確保可以從 tests/ 目錄匯入專案模組
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from datasets.graph_io import Corpus, SparseGraph, partition_nodes  # noqa: E402
from datasets.synthgen import (  # noqa: E402
    DirichletSpec,
    GroundTruth,
    connectivity_matrix,
    generate_lda,
    generate_mmsb,
    random_topics,
    sample_memberships,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def clique_truth() -> GroundTruth:
    """120 個節點、3 個社群，節點 i 屬於社群 i % 3。"""
    labels = np.arange(120) % 3
    return GroundTruth(Pi=np.eye(3)[:, labels], P=np.eye(3))


@pytest.fixture
def clique_graph(clique_truth: GroundTruth) -> SparseGraph:
    """三個互不相連的完全子圖；Pairs 矩陣的秩恰為 3。"""
    return generate_mmsb(clique_truth, "bernoulli", seed=0)


@pytest.fixture
def clique_partition(clique_graph: SparseGraph):
    return partition_nodes(clique_graph, (0.25, 0.25, 0.25, 0.25), seed=7, k=3)


@pytest.fixture
def block_graph() -> tuple[SparseGraph, np.ndarray]:
    """區塊模型（α₀ = 0）的 200 節點圖與其真實 Π。"""
    spec = DirichletSpec.symmetric(3, 0.0)
    Pi = sample_memberships(spec, 200, seed=1)
    truth = GroundTruth(Pi=Pi, P=connectivity_matrix(3, 0.8, 0.05))
    return generate_mmsb(truth, "bernoulli", seed=2), Pi


@pytest.fixture
def topic_corpus() -> tuple[Corpus, np.ndarray, DirichletSpec]:
    """詞彙 30、3 個主題、300 份長度 40 的文件。"""
    mu = random_topics(30, 3, seed=3, concentration=0.2)
    spec = DirichletSpec.symmetric(3, 1.0)
    corpus = generate_lda(GroundTruth(mu=mu), spec, n_docs=300, doc_length=40, seed=4)
    return corpus, mu, spec
