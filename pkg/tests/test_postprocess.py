"""後處理（μ̂、Π̂、α̂、門檻）的單元測試"""
from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import DegenerateComponentError, ValidationError
from spectral.postprocess import (
    _align_rows,
    apply_threshold,
    dirichlet_weights,
    eigenvalues_from_norms,
    raw_memberships,
    recover_memberships,
    recover_topics,
)
from spectral.stgd import EigenEstimate
from spectral.whitening import WhiteningContext


def _context(W: np.ndarray) -> WhiteningContext:
    return WhiteningContext(
        W=W, singular_values=np.ones(W.shape[1]), method="exact-small",
        projection_seed=0, projection_width=W.shape[1],
    )


# ====================================================================
# 特徵值與權重
# ====================================================================

class TestDirichletWeights:
    """測試 eigenvalues_from_norms 與 dirichlet_weights"""

    def test_norm_cubed(self) -> None:
        Phi = np.array([[3.0, 0.0], [4.0, 1.0]])
        assert_allclose(eigenvalues_from_norms(Phi), [125.0, 1.0])

    def test_inverse_square_weights(self) -> None:
        alpha, gamma = dirichlet_weights(np.array([1.0, 2.0]))
        assert_allclose(alpha, [0.8, 0.2])
        assert gamma == pytest.approx(1.25 ** -0.5)
        assert alpha.sum() == pytest.approx(1.0)

    def test_zero_eigenvalue(self) -> None:
        with pytest.raises(DegenerateComponentError) as exc:
            dirichlet_weights(np.array([1.0, 0.0, 2.0]))
        assert exc.value.indices == [1]


# ====================================================================
# 門檻
# ====================================================================

class TestApplyThreshold:
    """測試 apply_threshold 函式"""

    def test_small_entries_zeroed(self) -> None:
        Pi, zero = apply_threshold(np.array([[0.9, 0.02], [0.1, 0.98]]), 0.05)
        assert_allclose(Pi, [[0.9, 0.0], [0.1, 1.0]])
        assert zero == 0

    def test_negative_rows_flipped(self) -> None:
        Pi, _ = apply_threshold(np.array([[-1.0, -2.0], [1.0, 1.0]]), 0.0)
        assert_allclose(Pi, [[0.5, 2 / 3], [0.5, 1 / 3]])

    def test_columns_stochastic_or_zero(self, rng) -> None:
        raw = rng.standard_normal((4, 30)) + 0.5
        Pi, zero = apply_threshold(raw, 0.1)
        sums = Pi.sum(axis=0)
        assert np.all(Pi >= 0)
        assert np.all(np.isclose(sums, 1.0) | (sums == 0))
        assert zero == int(np.sum(sums == 0))
        assert np.all((Pi == 0) | (Pi > 0.1) | np.isclose(Pi, 1.0))

    def test_all_zero_column_counted(self) -> None:
        _, zero = apply_threshold(np.array([[1.0, 0.0], [1.0, 0.0]]), 0.05)
        assert zero == 1

    @pytest.mark.parametrize("threshold", [-0.1, 1.5])
    def test_out_of_range(self, threshold) -> None:
        with pytest.raises(ValidationError):
            apply_threshold(np.ones((2, 2)), threshold)


# ====================================================================
# 主題
# ====================================================================

class TestRecoverTopics:
    """測試 recover_topics 函式"""

    def test_recovers_columns_in_span(self, rng) -> None:
        mu = rng.dirichlet(np.ones(12), size=3).T              # 12×3
        R = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        W = mu @ R
        scales = np.array([0.5, 1.0, 2.0])
        Phi = W.T @ mu * scales
        estimate = recover_topics(_context(W), EigenEstimate.from_phi(Phi, 1, 0.0))
        assert_allclose(estimate.mu_hat, mu, atol=1e-10)
        assert_allclose(estimate.alpha_hat.sum(), 1.0)
        assert estimate.zero_columns == 0

    def test_dimension_mismatch(self, rng) -> None:
        with pytest.raises(ValidationError):
            recover_topics(
                _context(rng.standard_normal((5, 3))),
                EigenEstimate.from_phi(np.eye(2), 1, 0.0),
            )


# ====================================================================
# 社群
# ====================================================================

class TestRecoverMemberships:
    """測試 raw_memberships、recover_memberships 與列對齊"""

    def test_raw_formula(self, clique_graph, clique_partition, rng) -> None:
        part = clique_partition
        W = rng.standard_normal((len(part.A), 3))
        Phi = rng.standard_normal((3, 3))
        est = EigenEstimate.from_phi(Phi, 1, 0.0)
        raw = raw_memberships(clique_graph, part, _context(W), est)

        Lambda = np.linalg.norm(Phi, axis=0) ** 3
        gamma = np.sum(Lambda ** -2.0) ** -0.5
        V = Phi / np.linalg.norm(Phi, axis=0)
        G = clique_graph.adjacency.toarray()[np.ix_(part.A, part.complement_of_a())]
        expected = gamma ** (1 / 3) * np.diag(1 / Lambda) @ V.T @ W.T @ G
        assert raw.shape == (3, len(part.complement_of_a()))
        assert_allclose(raw, expected, atol=1e-10)

    def test_raw_uses_unit_eigenvectors(self, clique_graph, clique_partition, rng) -> None:
        # 成分同向但範數不同時，結果只差 1/λ 的倍數，不帶 ‖φ‖ 的額外因子
        part = clique_partition
        W = rng.standard_normal((len(part.A), 3))
        ctx = _context(W)
        short = raw_memberships(clique_graph, part, ctx, EigenEstimate.from_phi(np.eye(3), 1, 0.0))
        Phi = np.diag([1.0, 2.0, 3.0])
        long = raw_memberships(clique_graph, part, ctx, EigenEstimate.from_phi(Phi, 1, 0.0))
        Lambda = np.array([1.0, 8.0, 27.0])
        gamma_ratio = (np.sum(Lambda ** -2.0) ** -0.5 / 3 ** -0.5) ** (1 / 3)
        assert_allclose(long, gamma_ratio * short / Lambda[:, None], atol=1e-10)

    def test_raw_dimension_mismatch(self, clique_graph, clique_partition) -> None:
        with pytest.raises(ValidationError):
            raw_memberships(
                clique_graph, clique_partition, _context(np.ones((5, 3))),
                EigenEstimate.from_phi(np.eye(3), 1, 0.0),
            )

    def test_align_rows(self, rng) -> None:
        ref = rng.random((3, 40))
        perm = np.array([2, 0, 1])
        other = ref[perm] * 2.0
        cols = _align_rows(ref, other)
        assert_allclose(other[cols], ref * 2.0)

    def test_full_matrix(self, clique_graph, clique_partition, rng) -> None:
        part = clique_partition
        W = np.abs(rng.standard_normal((len(part.A), 3)))
        est = EigenEstimate.from_phi(np.eye(3), 1, 0.0)
        estimate = recover_memberships(
            clique_graph, part, _context(W), est, threshold=0.05,
            exchange=(_context(np.abs(rng.standard_normal((len(part.X), 3)))), est),
        )
        assert estimate.Pi_hat.shape == (3, clique_graph.n_nodes)
        sums = estimate.Pi_hat.sum(axis=0)
        assert np.all(np.isclose(sums, 1.0) | (sums == 0))
        assert estimate.raw.shape == estimate.Pi_hat.shape
        assert_allclose(estimate.alpha_hat, 1 / 3)
        # 集合 A 的欄位由交換輪提供
        assert np.any(estimate.raw[:, part.A] != 0)

        looser = estimate.with_threshold(0.0)
        assert looser.threshold == 0.0
        assert np.count_nonzero(looser.Pi_hat) >= np.count_nonzero(estimate.Pi_hat)

    def test_without_exchange_a_is_zero(self, clique_graph, clique_partition, rng) -> None:
        part = clique_partition
        W = np.abs(rng.standard_normal((len(part.A), 3)))
        estimate = recover_memberships(
            clique_graph, part, _context(W), EigenEstimate.from_phi(np.eye(3), 1, 0.0)
        )
        assert np.all(estimate.Pi_hat[:, part.A] == 0)
        assert estimate.zero_columns >= len(part.A)
