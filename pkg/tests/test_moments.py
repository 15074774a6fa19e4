"""動差計算的單元測試（以稠密 numpy 計算作為 oracle）"""
from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from datasets.graph_io import Corpus
from datasets.synthgen import DirichletSpec, GroundTruth, generate_lda, random_topics
from errors import DegenerateMomentError, ValidationError
from spectral.moments import (
    LowRankFactor,
    SymmetricFactored,
    compute_m2_community,
    compute_m2_topic,
    compute_pairs,
    compute_symmetrizers,
    dump_expanded_m2,
    third_moment_sample_stream,
    truncated_pairs_svd,
)
from utils.text_io import read_dense


def _dense_block(graph, rows, cols) -> np.ndarray:
    return graph.adjacency.toarray()[np.ix_(rows, cols)]


# ====================================================================
# Pairs
# ====================================================================

class TestPairs:
    """測試 compute_pairs 與 truncated_pairs_svd"""

    def test_matches_dense(self, clique_graph, clique_partition) -> None:
        part = clique_partition
        pairs = compute_pairs(clique_graph, part, "B", "C")
        G_xb = _dense_block(clique_graph, part.X, part.B)
        G_xc = _dense_block(clique_graph, part.X, part.C)
        expected = G_xb.T @ G_xc / len(part.X)
        assert_allclose(pairs.expand(), expected)
        V = np.ones((len(part.C), 2))
        assert_allclose(pairs.matmat(V), expected @ V)
        assert_allclose(pairs.transpose().expand(), expected.T)

    @pytest.mark.parametrize("method", ["randomized", "lanczos"])
    def test_top_singular_values(self, clique_graph, clique_partition, method) -> None:
        pairs = compute_pairs(clique_graph, clique_partition, "B", "C")
        U, s, V = truncated_pairs_svd(pairs, 3, method=method, seed=1)
        dense_s = np.linalg.svd(pairs.expand(), compute_uv=False)[:3]
        assert_allclose(s, dense_s, rtol=1e-6)
        assert_allclose(U @ np.diag(s) @ V.T, pairs.expand(), atol=1e-8)

    def test_rank_deficient(self, clique_graph, clique_partition) -> None:
        pairs = compute_pairs(clique_graph, clique_partition, "B", "C")
        with pytest.raises(DegenerateMomentError) as exc:
            truncated_pairs_svd(pairs, 4, method="randomized", seed=1)
        assert exc.value.numerical_rank == 3

    def test_unknown_method(self, clique_graph, clique_partition) -> None:
        pairs = compute_pairs(clique_graph, clique_partition, "B", "C")
        with pytest.raises(ValidationError):
            truncated_pairs_svd(pairs, 2, method="nystrom")


class TestSymmetrizers:
    """測試 compute_symmetrizers 函式"""

    def test_matches_dense_pseudo_inverse(self, clique_graph, clique_partition) -> None:
        part = clique_partition
        symm = compute_symmetrizers(clique_graph, part, 3, seed=2)
        G = {s: _dense_block(clique_graph, part.X, part.get(s)) for s in "ABC"}
        n_x = len(part.X)
        pairs = {(a, b): G[a].T @ G[b] / n_x for a in "ABC" for b in "ABC"}
        Z_B = pairs["A", "C"] @ np.linalg.pinv(pairs["B", "C"], rcond=1e-10)
        Z_C = pairs["A", "B"] @ np.linalg.pinv(pairs["C", "B"], rcond=1e-10)
        assert_allclose(symm.Z_B.expand(), Z_B, atol=1e-8)
        assert_allclose(symm.Z_C.expand(), Z_C, atol=1e-8)

    def test_low_rank_factor_products(self, rng) -> None:
        Z = LowRankFactor(
            left=rng.standard_normal((6, 2)),
            core=np.diag([2.0, 0.5]),
            right=rng.standard_normal((4, 2)),
        )
        V = rng.standard_normal((4, 3))
        U = rng.standard_normal((6, 3))
        assert Z.shape == (6, 4)
        assert_allclose(Z.matmat(V), Z.expand() @ V)
        assert_allclose(Z.rmatmat(U), Z.expand().T @ U)


# ====================================================================
# M1 / M2
# ====================================================================

class TestSecondMoments:
    """測試 compute_m2_community 與 compute_m2_topic"""

    @pytest.mark.parametrize("alpha0", [0.0, 1.5])
    def test_community_factored_form(self, clique_graph, clique_partition, alpha0) -> None:
        part = clique_partition
        symm = compute_symmetrizers(clique_graph, part, 3, seed=2)
        summary = compute_m2_community(clique_graph, part, symm, alpha0, workers=2)

        G = {s: _dense_block(clique_graph, part.X, part.get(s)) for s in "ABC"}
        n_x = len(part.X)
        M1 = G["A"].mean(axis=0)
        S = symm.Z_C.expand() @ G["C"].T @ G["B"] @ symm.Z_B.expand().T / n_x
        outer = np.outer(M1, M1)
        expected = (alpha0 + 1) * 0.5 * (S + S.T) - alpha0 * (outer - np.diag(np.diag(outer)))
        assert_allclose(summary.M1, M1)
        assert_allclose(summary.M2.expand(), expected, atol=1e-10)
        assert summary.n_samples == n_x

    def test_topic_factored_form(self, topic_corpus) -> None:
        corpus, _, _ = topic_corpus
        alpha0 = 1.0
        summary = compute_m2_topic(corpus, alpha0, workers=3, normalize=False)
        C = corpus.freq.toarray()
        n = C.shape[0]
        M1 = C.mean(axis=0)
        expected = (alpha0 + 1) / n * (C.T @ C - np.diag(C.sum(axis=0))) - alpha0 * np.outer(M1, M1)
        assert_allclose(summary.M1, M1)
        assert_allclose(summary.M2.expand(), expected, atol=1e-10)
        assert summary.path == "topic"

    def test_topic_count_form_single_document(self) -> None:
        # 兩個相同的詞：c c^T − diag(c) = [[2, 0], [0, 0]]
        corpus = Corpus(freq=sp.csr_matrix(np.array([[2.0, 0.0]])))
        summary = compute_m2_topic(corpus, 0.0, normalize=False)
        assert_allclose(summary.M2.expand(), [[2.0, 0.0], [0.0, 0.0]])

    def test_topic_normalized_form(self) -> None:
        counts = np.array([[2.0, 1.0, 0.0], [0.0, 3.0, 2.0], [1.0, 1.0, 1.0], [4.0, 0.0, 1.0]])
        corpus = Corpus(freq=sp.csr_matrix(counts))
        alpha0 = 0.7
        summary = compute_m2_topic(corpus, alpha0)
        L = counts.sum(axis=1)
        M1 = (counts / L[:, None]).mean(axis=0)
        pairs = sum(
            (np.outer(c, c) - np.diag(c)) / (l * (l - 1)) for c, l in zip(counts, L)
        ) / len(counts)
        assert_allclose(summary.M1, M1)
        assert_allclose(summary.M2.expand(), (alpha0 + 1) * pairs - alpha0 * np.outer(M1, M1), atol=1e-12)
        # 正規化後 M1 與相異詞對分佈各自總和為 1
        assert summary.M1.sum() == pytest.approx(1.0)
        assert pairs.sum() == pytest.approx(1.0)

    def test_normalization_requires_three_words(self) -> None:
        corpus = Corpus(freq=sp.csr_matrix(np.array([[1.0, 1.0], [2.0, 1.0]])))
        with pytest.raises(ValidationError):
            compute_m2_topic(corpus, 1.0)
        compute_m2_topic(corpus, 1.0, normalize=False)

    def test_topic_first_moment_consistent(self, topic_corpus) -> None:
        corpus, mu, spec = topic_corpus
        summary = compute_m2_topic(corpus, spec.alpha0)
        freq = corpus.freq.toarray() / 40.0
        expected = mu @ spec.weights
        n = freq.shape[0]
        # 極少出現的詞以 √(期望/(nL)) 作為標準誤下限
        stderr = np.maximum(freq.std(axis=0), np.sqrt(expected / 40.0)) / np.sqrt(n)
        assert np.all(np.abs(summary.M1 - expected) <= 4 * stderr)

    def test_topic_moments_match_population_across_seeds(self) -> None:
        # Dirichlet 混合下 M2 = μ diag(α/α₀) μᵀ；20 組種子的平均應落在 4 個標準誤內
        d, k, alpha0 = 5, 2, 1.0
        mu = random_topics(d, k, seed=11, concentration=1.0)
        spec = DirichletSpec.symmetric(k, alpha0)
        population_m2 = mu @ np.diag(spec.weights) @ mu.T
        population_m1 = mu @ spec.weights
        m1s, m2s = [], []
        for seed in range(20):
            corpus = generate_lda(GroundTruth(mu=mu), spec, n_docs=2000, doc_length=10, seed=seed)
            summary = compute_m2_topic(corpus, alpha0)
            m1s.append(summary.M1)
            m2s.append(summary.M2.expand())
        for estimates, population in ((np.array(m1s), population_m1), (np.array(m2s), population_m2)):
            stderr = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
            assert np.all(np.abs(estimates.mean(axis=0) - population) <= 4 * stderr + 1e-12)

    def test_negative_alpha0(self, topic_corpus) -> None:
        corpus, _, _ = topic_corpus
        with pytest.raises(ValidationError):
            compute_m2_topic(corpus, -0.5)

    def test_operator_matches_expand(self, rng) -> None:
        basis = rng.standard_normal((5, 2))
        M = SymmetricFactored(
            dim=5, basis=basis, core=np.eye(2), outer_vec=np.ones(5),
            outer_scale=-0.5, diag=np.arange(5.0),
        )
        v = rng.standard_normal(5)
        assert_allclose(M.as_operator().matvec(v), M.expand() @ v)
        assert_allclose(M.expand(), M.expand().T)

    def test_expand_limit(self) -> None:
        with pytest.raises(ValidationError):
            SymmetricFactored(dim=10, diag=np.ones(10)).expand(max_dim=5)

    def test_dump(self, tmp_path, topic_corpus) -> None:
        corpus, _, _ = topic_corpus
        summary = compute_m2_topic(corpus, 1.0)
        dump_expanded_m2(summary, tmp_path / "m2.txt")
        assert_allclose(read_dense(tmp_path / "m2.txt"), summary.M2.expand())


# ====================================================================
# 三階樣本串流
# ====================================================================

class TestSampleStream:
    """測試 third_moment_sample_stream 函式"""

    def test_topic_views_aliased(self, topic_corpus) -> None:
        corpus, _, _ = topic_corpus
        stream = third_moment_sample_stream(corpus, 1.0)
        assert stream.aliased
        assert len(stream) == corpus.n_docs
        first = next(iter(stream))
        assert first.a is first.b is first.c
        assert_allclose(stream.doc_weights.first, 1.0 / 40.0)
        assert_allclose(stream.doc_weights.triple, 1.0 / (40.0 * 39.0 * 38.0))
        assert stream.shuffled(seed=1).doc_weights is stream.doc_weights

    def test_unnormalized_topic_weights_are_ones(self, topic_corpus) -> None:
        corpus, _, _ = topic_corpus
        weights = third_moment_sample_stream(corpus, 1.0, normalize=False).doc_weights
        assert_allclose(weights.pair, 1.0)
        assert_allclose(weights.triple, 1.0)

    def test_community_views(self, clique_graph, clique_partition) -> None:
        part = clique_partition
        stream = third_moment_sample_stream(clique_graph, 0.0, part)
        assert not stream.aliased
        assert np.array_equal(stream.sample_ids, part.X)
        triples = list(stream)
        assert len(triples) == len(part.X)
        x = part.X[0]
        assert_allclose(
            triples[0].b.toarray().ravel(),
            clique_graph.adjacency.toarray()[x, part.B],
        )

    def test_shuffle_is_permutation(self, topic_corpus) -> None:
        corpus, _, _ = topic_corpus
        stream = third_moment_sample_stream(corpus, 1.0).shuffled(seed=9)
        order = stream.order()
        assert sorted(order.tolist()) == list(range(corpus.n_docs))
        assert np.array_equal(order, stream.shuffled(seed=9).order())
        assert [t.index for t in stream][:5] == order[:5].tolist()

    def test_community_requires_partition(self, clique_graph) -> None:
        with pytest.raises(ValidationError):
            third_moment_sample_stream(clique_graph, 0.0)
