"""STGD 的單元測試：梯度 oracle、隱式／顯式張量等價與已知頻譜分解"""
from __future__ import annotations

import csv

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from errors import ConfigurationError, DivergenceError, ValidationError
from spectral.moments import document_weights
from spectral.stgd import (
    TRACE_HEADER,
    EigenEstimate,
    StgdConfig,
    TensorShift,
    contraction_eigenpairs,
    curvature_scale,
    descent_objective,
    initial_phi,
    loss_at_sample,
    run_stgd,
    stgd_step,
    tensor_gradient,
    tensor_value,
)
from spectral.whitening import SampleBatch, WhitenedViews


def _fd_gradient(phi: np.ndarray, sample, theta: float, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(phi)
    for idx in np.ndindex(*phi.shape):
        plus, minus = phi.copy(), phi.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (loss_at_sample(plus, sample, theta) - loss_at_sample(minus, sample, theta)) / (2 * h)
    return grad


def _orthogonal_views(lambdas, per_component: int, seed: int) -> tuple[WhitenedViews, np.ndarray]:
    """E[y⊗y⊗y] = Σ λᵢ uᵢ⊗uᵢ⊗uᵢ，uᵢ 為隨機正交基底。"""
    k = len(lambdas)
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((k, k)))
    # 每個成分佔 1/k 的樣本，縮放 s 使 s³/k = λ
    scales = np.cbrt(np.asarray(lambdas) * k)
    rows = np.repeat(U.T * scales[:, None], per_component, axis=0)
    return WhitenedViews.from_arrays(rows, rows, rows), U


def _fd_value_gradient(phi: np.ndarray, sample, shift, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(phi)
    for idx in np.ndindex(*phi.shape):
        plus, minus = phi.copy(), phi.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (
            tensor_value(plus, sample, shift).sum() - tensor_value(minus, sample, shift).sum()
        ) / (2 * h)
    return grad


def _count_batch(rng: np.random.Generator, n: int, d: int, k: int) -> SampleBatch:
    """n 份長度 4~9 的文件，詞頻集中在少數詞以產生重複。"""
    counts = np.zeros((n, d))
    for t in range(n):
        words = rng.integers(0, max(d // 2, 1), size=int(rng.integers(4, 10)))
        np.add.at(counts[t], words, 1.0)
    C = sp.csr_matrix(counts)
    W = rng.standard_normal((d, k)) / np.sqrt(d)
    weights = document_weights(counts.sum(axis=1))
    y = np.asarray(C @ W)
    return SampleBatch(
        y, y, y, counts=C, W=W,
        pair_weight=weights.pair, triple_weight=weights.triple,
    )


def _distinct_triples(c: np.ndarray) -> np.ndarray:
    """Σ 相異位置的 x_p⊗x_q⊗x_r（d×d×d）。"""
    d = len(c)
    idx = np.arange(d)
    cc = np.outer(c, c)
    T = np.einsum("i,j,l->ijl", c, c, c)
    T[idx, idx, :] -= cc
    T[idx, :, idx] -= cc
    T[:, idx, idx] -= cc
    T[idx, idx, idx] += 2.0 * c
    return T


# ====================================================================
# StgdConfig
# ====================================================================

class TestStgdConfig:
    """測試 StgdConfig 的檢查與預設值"""

    def test_resolve_defaults(self) -> None:
        cfg = StgdConfig().resolve(k=4, n_samples=50, alpha0=0.0, scale=2.0)
        assert cfg.learn_rate_0 == pytest.approx(0.05)
        assert cfg.decay_tau == float("inf")
        assert cfg.shifted is False
        assert cfg.full_batch(50)

    def test_resolve_minibatch_defaults(self) -> None:
        cfg = StgdConfig(batch=10).resolve(k=4, n_samples=50, scale=2.0)
        assert cfg.learn_rate_0 == pytest.approx(0.005)
        assert cfg.decay_tau == pytest.approx(500.0)
        assert not cfg.full_batch(50)

    def test_resolve_rejects_bad_scale(self) -> None:
        with pytest.raises(ValidationError):
            StgdConfig().resolve(k=2, n_samples=5, scale=0.0)

    def test_resolve_shift_follows_alpha0(self) -> None:
        assert StgdConfig().resolve(3, 10, alpha0=1.0).shifted is True
        assert StgdConfig(shifted=False).resolve(3, 10, alpha0=1.0).shifted is False

    def test_learning_rate_decay(self) -> None:
        cfg = StgdConfig(learn_rate_0=0.1, decay_tau=10.0)
        assert cfg.learning_rate(0) == pytest.approx(0.1)
        assert cfg.learning_rate(10) == pytest.approx(0.05)

    def test_unresolved_learning_rate(self) -> None:
        with pytest.raises(ConfigurationError):
            StgdConfig().learning_rate(0)

    @pytest.mark.parametrize("kwargs", [
        {"theta": 0.0},
        {"learn_rate_0": -1.0},
        {"batch": 0},
        {"tol": -1.0},
        {"shift_form": "sideways"},
        {"init": "spiral"},
    ])
    def test_invalid(self, kwargs) -> None:
        with pytest.raises(ConfigurationError):
            StgdConfig(**kwargs)


# ====================================================================
# 單步更新
# ====================================================================

class TestStgdStep:
    """測試 stgd_step 與 loss_at_sample"""

    def test_gradient_oracle(self) -> None:
        rng = np.random.default_rng(2024)
        beta = 1e-3
        for _ in range(100):
            k = int(rng.integers(2, 6))
            theta = float(rng.uniform(0.5, 2.0))
            phi = rng.standard_normal((k, k)) / np.sqrt(k)
            sample = tuple(rng.standard_normal(k) for _ in range(3))
            cfg = StgdConfig(theta=theta)
            direction = (phi - stgd_step(phi, sample, cfg, 0, beta=beta)) / beta
            # 更新方向為損失在 θ/2 時的梯度
            expected = _fd_gradient(phi, sample, theta / 2)
            assert_allclose(direction, expected, rtol=1e-5, atol=1e-7)

    def test_implicit_matches_explicit_tensor(self) -> None:
        rng = np.random.default_rng(7)
        k, n, theta = 4, 150, 1.3
        ya, yb, yc = (rng.standard_normal((n, k)) for _ in range(3))
        phi = rng.standard_normal((k, k)) / 2
        T = np.einsum("np,nq,nr->pqr", ya, yb, yc) / n
        data = (
            np.einsum("pqr,qi,ri->pi", T, phi, phi)
            + np.einsum("pqr,pi,ri->qi", T, phi, phi)
            + np.einsum("pqr,pi,qi->ri", T, phi, phi)
        )
        G = phi.T @ phi
        expected = phi - 3 * theta * phi @ (G * G) + data
        updated = stgd_step(phi, (ya, yb, yc), StgdConfig(theta=theta), 0, beta=1.0)
        assert_allclose(updated, expected, atol=1e-8)

    def test_zero_learning_rate(self, rng) -> None:
        phi = rng.standard_normal((3, 3))
        sample = tuple(rng.standard_normal(3) for _ in range(3))
        out = stgd_step(phi, sample, StgdConfig(), 0, beta=0.0)
        assert np.array_equal(out, phi)
        assert out is not phi

    def test_shift_without_alpha0_matches_plain(self, rng) -> None:
        phi = rng.standard_normal((3, 3))
        y = rng.standard_normal((5, 3))
        means = (y.mean(axis=0),) * 3
        plain = stgd_step(phi, (y, y, y), StgdConfig(shifted=False), 0, beta=0.01)
        shifted = stgd_step(
            phi, (y, y, y), StgdConfig(shifted=True), 0, means=means, alpha0=0.0, beta=0.01
        )
        assert_allclose(shifted, plain, atol=1e-12)

    def test_shift_forms_differ(self, rng) -> None:
        phi = rng.standard_normal((3, 3))
        y = rng.standard_normal((5, 3))
        means = (y.mean(axis=0),) * 3
        printed = stgd_step(
            phi, (y, y, y), StgdConfig(shifted=True, shift_form="printed"), 0,
            means=means, alpha0=1.0, beta=0.01,
        )
        centered = stgd_step(
            phi, (y, y, y), StgdConfig(shifted=True, shift_form="centered"), 0,
            means=means, alpha0=1.0, beta=0.01,
        )
        assert not np.allclose(printed, centered)

    def test_shift_requires_means(self, rng) -> None:
        phi = rng.standard_normal((3, 3))
        sample = tuple(rng.standard_normal(3) for _ in range(3))
        with pytest.raises(ValidationError):
            stgd_step(phi, sample, StgdConfig(shifted=True), 0, alpha0=1.0, beta=0.1)

    def test_dimension_mismatch(self, rng) -> None:
        phi = rng.standard_normal((3, 3))
        sample = tuple(rng.standard_normal(4) for _ in range(3))
        with pytest.raises(ValidationError):
            stgd_step(phi, sample, StgdConfig(), 0, beta=0.1)

    def test_divergence(self) -> None:
        phi = np.eye(2)
        sample = (np.full(2, 1e200),) * 3
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as exc:
                stgd_step(phi, sample, StgdConfig(), 17, beta=1.0)
        assert exc.value.iteration == 17


# ====================================================================
# 隱式張量
# ====================================================================

class TestImplicitTensor:
    """測試 tensor_value / tensor_gradient 的中心化與重複詞修正"""

    @pytest.mark.parametrize("shift_form", ["centered", "printed"])
    def test_shifted_gradient_matches_finite_difference(self, rng, shift_form) -> None:
        k, n = 3, 8
        ya, yb, yc = (rng.standard_normal((n, k)) for _ in range(3))
        means = tuple(rng.standard_normal(k) for _ in range(3))
        shift = TensorShift.build(means, alpha0=1.5, shift_form=shift_form)
        phi = rng.standard_normal((k, k))
        analytic = tensor_gradient(phi, (ya, yb, yc), shift)
        assert_allclose(analytic, _fd_value_gradient(phi, (ya, yb, yc), shift), rtol=1e-5, atol=1e-7)

    def test_shifted_gradient_matches_explicit_centered_tensor(self, rng) -> None:
        k, n, alpha0 = 3, 40, 1.0
        ya, yb, yc = (rng.standard_normal((n, k)) for _ in range(3))
        mu_a, mu_b, mu_c = ya.mean(axis=0), yb.mean(axis=0), yc.mean(axis=0)
        shift = TensorShift.build((mu_a, mu_b, mu_c), alpha0)
        T = np.einsum("np,nq,nr->pqr", ya, yb, yc) / n
        cross = (
            np.einsum("pq,r->pqr", ya.T @ yb / n, mu_c)
            + np.einsum("pr,q->pqr", ya.T @ yc / n, mu_b)
            + np.einsum("qr,p->pqr", yb.T @ yc / n, mu_a)
        )
        T = T - alpha0 / (alpha0 + 2) * cross
        T = T + 2 * alpha0 ** 2 / ((alpha0 + 1) * (alpha0 + 2)) * np.einsum(
            "p,q,r->pqr", mu_a, mu_b, mu_c
        )
        phi = rng.standard_normal((k, k))
        expected = (
            np.einsum("pqr,qi,ri->pi", T, phi, phi)
            + np.einsum("pqr,pi,ri->qi", T, phi, phi)
            + np.einsum("pqr,pi,qi->ri", T, phi, phi)
        )
        assert_allclose(tensor_gradient(phi, (ya, yb, yc), shift), expected, atol=1e-10)
        assert_allclose(
            tensor_value(phi, (ya, yb, yc), shift),
            np.einsum("pqr,pi,qi,ri->i", T, phi, phi, phi),
            atol=1e-10,
        )

    def test_corrected_value_matches_explicit_tensor(self, rng) -> None:
        d, k, n = 6, 2, 5
        batch = _count_batch(rng, n, d, k)
        phi = rng.standard_normal((k, k))
        P = batch.W @ phi
        counts = batch.counts.toarray()
        expected = np.zeros(k)
        for t in range(n):
            T = _distinct_triples(counts[t])
            expected += batch.triple_weight[t] * np.einsum("pqr,pi,qi,ri->i", T, P, P, P)
        assert_allclose(tensor_value(phi, batch), expected / n, atol=1e-12)

    def test_repeated_word_normalizes_to_one(self) -> None:
        # 三個位置都是同一個詞：6 個有序相異三元組都是 (w,w,w)
        C = sp.csr_matrix(np.array([[3.0, 0.0]]))
        W = np.eye(2)
        weights = document_weights(np.array([3.0]))
        batch = SampleBatch(
            np.array([[3.0, 0.0]]), np.array([[3.0, 0.0]]), np.array([[3.0, 0.0]]),
            counts=C, W=W, pair_weight=weights.pair, triple_weight=weights.triple,
        )
        assert_allclose(tensor_value(np.eye(2), batch), [1.0, 0.0])

    @pytest.mark.parametrize("shifted", [False, True])
    def test_corrected_gradient_matches_finite_difference(self, rng, shifted) -> None:
        d, k = 7, 3
        batch = _count_batch(rng, 6, d, k)
        shift = None
        if shifted:
            mu = batch.y_a.mean(axis=0) / 5.0
            shift = TensorShift.build((mu, mu, mu), alpha0=0.8)
        phi = rng.standard_normal((k, k))
        assert_allclose(
            tensor_gradient(phi, batch, shift),
            _fd_value_gradient(phi, batch, shift),
            rtol=1e-5, atol=1e-7,
        )

    def test_step_descends_objective(self, rng) -> None:
        batch = _count_batch(rng, 10, 8, 2)
        mu = batch.y_a.mean(axis=0)
        means = (mu, mu, mu)
        cfg = StgdConfig(shifted=True)
        shift = TensorShift.build(means, 1.0)
        phi = rng.standard_normal((2, 2))
        beta = 1e-6
        updated = stgd_step(phi, batch, cfg, 0, means=means, alpha0=1.0, beta=beta)
        G = phi.T @ phi
        gradient = 3 * phi @ (G * G) - tensor_gradient(phi, batch, shift)
        assert_allclose((phi - updated) / beta, gradient, rtol=1e-6, atol=1e-8)
        assert descent_objective(updated, batch, 1.0, shift) < descent_objective(phi, batch, 1.0, shift)


class TestContraction:
    """測試收縮初始化"""

    def test_recovers_orthogonal_components(self) -> None:
        lambdas = np.array([1.0, 0.6, 0.3])
        views, U = _orthogonal_views(lambdas, per_component=4, seed=9)
        vecs, lam = contraction_eigenpairs(views.full(), 3, seed=0)
        cos = U.T @ vecs
        match = np.abs(cos).argmax(axis=1)
        assert sorted(match.tolist()) == [0, 1, 2]
        # 定號後與真實方向同向
        assert_allclose(cos[np.arange(3), match], np.ones(3), atol=1e-8)
        assert_allclose(lam[match], lambdas, rtol=1e-8)

    def test_curvature_scale(self) -> None:
        assert curvature_scale(np.array([8.0, 1.0]), 1.0) == pytest.approx(16.0)
        assert curvature_scale(np.zeros(2), 1.0) == 1.0


# ====================================================================
# run_stgd
# ====================================================================

class TestRunStgd:
    """測試 run_stgd 主迴圈"""

    def test_known_spectrum(self) -> None:
        lambdas = np.array([1.0, 0.7, 0.5])
        views, U = _orthogonal_views(lambdas, per_component=20, seed=3)
        cfg = StgdConfig(
            theta=1.0, learn_rate_0=0.05, decay_tau=1e12,
            max_epochs=3000, batch=views.n_samples, tol=1e-12, seed=1,
        )
        est = run_stgd(views, cfg)
        cos = np.abs(U.T @ est.normalized())
        # 每個真實方向都被某個估計成分對齊
        assert np.all(cos.max(axis=1) >= 0.99)
        match = cos.argmax(axis=1)
        assert sorted(match.tolist()) == [0, 1, 2]
        assert_allclose(est.Lambda[match], lambdas, rtol=0.05)

    def test_trace_and_determinism(self, tmp_path) -> None:
        views, _ = _orthogonal_views([1.0, 0.5], per_component=5, seed=0)
        trace = tmp_path / "trace.csv"
        cfg = StgdConfig(max_epochs=4, tol=0.0, seed=2, trace_path=trace)
        a = run_stgd(views, cfg)
        b = run_stgd(views, StgdConfig(max_epochs=4, tol=0.0, seed=2))
        assert np.array_equal(a.Phi, b.Phi)
        assert a.iterations_run == 4
        with open(trace, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == TRACE_HEADER
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]

    def test_stops_when_converged(self) -> None:
        views, _ = _orthogonal_views([1.0, 0.5], per_component=5, seed=0)
        est = run_stgd(views, StgdConfig(max_epochs=50, tol=1e6))
        assert est.iterations_run == 1

    def test_zero_epochs_returns_initial(self) -> None:
        views, _ = _orthogonal_views([1.0, 0.5], per_component=5, seed=0)
        est = run_stgd(views, StgdConfig(max_epochs=0, seed=4, init="random"))
        assert_allclose(est.Phi, initial_phi(2, 4))
        assert est.iterations_run == 0
        assert est.converged is False

    def test_default_run_converges_at_fixed_point(self) -> None:
        lambdas = np.array([1.0, 0.8, 0.4])
        views, U = _orthogonal_views(lambdas, per_component=6, seed=5)
        est = run_stgd(views, StgdConfig())
        assert est.converged is True
        assert est.iterations_run < 200
        match = np.abs(U.T @ est.normalized()).argmax(axis=1)
        assert_allclose(est.Lambda[match], lambdas, rtol=1e-4)

    def test_random_start_converges_with_default_schedule(self) -> None:
        lambdas = np.array([1.0, 0.7])
        views, U = _orthogonal_views(lambdas, per_component=6, seed=8)
        est = run_stgd(views, StgdConfig(init="random", seed=3, max_epochs=2000))
        assert est.converged is True
        cos = np.abs(U.T @ est.normalized())
        assert np.all(cos.max(axis=1) >= 0.99)

    def test_reports_non_convergence(self) -> None:
        views, _ = _orthogonal_views([1.0, 0.5], per_component=5, seed=0)
        est = run_stgd(views, StgdConfig(init="random", max_epochs=1, tol=0.0, seed=6))
        assert est.iterations_run == 1
        assert est.converged is False

    def test_backtracking_never_increases_objective(self, tmp_path) -> None:
        views, _ = _orthogonal_views([1.0, 0.6, 0.3], per_component=4, seed=2)
        trace = tmp_path / "trace.csv"
        cfg = StgdConfig(
            init="random", learn_rate_0=50.0, max_epochs=30, tol=0.0, seed=1, trace_path=trace
        )
        run_stgd(views, cfg)
        with open(trace, encoding="utf-8") as f:
            losses = [float(r[1]) for r in list(csv.reader(f))[1:]]
        assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(losses, losses[1:]))

    def test_minibatch_mode(self) -> None:
        views, U = _orthogonal_views([1.0, 0.5], per_component=10, seed=4)
        est = run_stgd(views, StgdConfig(batch=3, max_epochs=5, seed=2))
        assert est.iterations_run <= 5
        assert np.all(np.isfinite(est.Phi))
        cos = np.abs(U.T @ est.normalized())
        assert np.all(cos.max(axis=1) >= 0.95)


class TestEigenEstimate:
    """測試 EigenEstimate"""

    def test_lambda_is_cubed_norm(self) -> None:
        est = EigenEstimate.from_phi(np.array([[2.0, 0.0], [0.0, 0.0]]), 1, 0.0)
        assert_allclose(est.Lambda, [8.0, 0.0])
        assert_allclose(est.normalized(), [[1.0, 0.0], [0.0, 0.0]])

    def test_initial_phi(self) -> None:
        phi = initial_phi(4, 0)
        assert_allclose(phi.T @ phi, np.eye(4) / 4, atol=1e-12)
