import numpy as np
import pytest
from scipy.optimize import brentq

from maxentnet.errors import DomainViolation, InvalidInput
from maxentnet.expfamily import ActivationKind, log_density, mean_lambda, sample
from maxentnet.manifold import run_chain
from maxentnet.numerics import RngStream, spd_solve
from maxentnet.saddle import (
    LayerMap,
    SolverConfig,
    gamma,
    gamma_inverse,
    inverse_vjp,
    solution_jacobians,
    vjp_through_inverse,
)

TED, TG, EXP, LINEAR = ActivationKind.TED, ActivationKind.TG, ActivationKind.EXP, ActivationKind.LINEAR
ALL_KINDS = [TED, TG, EXP, LINEAR]


def prior_problem(kind, N, M, seed, S=1):
    """Random layer and features z = W'x with x drawn from the prior."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((N, M)) / np.sqrt(N)
    lmap = LayerMap(W, kind)
    x = sample(kind, np.broadcast_to(lmap.theta0, (S, N)), RngStream(seed))
    return lmap, x @ W


class TestGamma:
    def test_linear_orthonormal_is_identity(self):
        W, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 3)))
        h = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(gamma(LayerMap(W, LINEAR), h), h, atol=1e-14)

    def test_ted_identity(self):
        np.testing.assert_array_equal(gamma(LayerMap(np.eye(2), TED), np.zeros(2)), [0.5, 0.5])

    def test_ted_ones(self):
        z = gamma(LayerMap(np.ones((2, 1)), TED), np.array([1.0]))
        np.testing.assert_allclose(z, [2 * 0.5819767068693265], rtol=1e-15)
        np.testing.assert_allclose(z, [1.16395], atol=1e-5)

    def test_domain_violation_index(self):
        W = np.array([[1.0], [-1.0], [0.5]])
        with pytest.raises(DomainViolation) as info:
            gamma(LayerMap(W, EXP), np.array([-3.0]))
        assert info.value.index == 1


class TestGammaInverse:
    def test_linear_is_least_squares(self):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((7, 3))
        z = rng.standard_normal(3)
        sol = gamma_inverse(LayerMap(W, LINEAR), z)
        np.testing.assert_allclose(sol.h, spd_solve(W.T @ W, z), atol=1e-10)
        assert sol.converged and sol.iterations == 0

    def test_ted_identity(self):
        sol = gamma_inverse(LayerMap(np.eye(2), TED), np.array([0.5, 0.5]))
        np.testing.assert_allclose(sol.h, [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(sol.x_hat, [0.5, 0.5], atol=1e-12)

    def test_ted_scalar_against_bisection(self):
        z = 1.16395
        oracle = brentq(lambda h: 2 * mean_lambda(TED, h) - z, -10, 10, xtol=1e-15)
        sol = gamma_inverse(LayerMap(np.ones((2, 1)), TED), np.array([z]))
        np.testing.assert_allclose(sol.h, [oracle], atol=1e-10)
        np.testing.assert_allclose(sol.h, [1.0], atol=1e-4)

    def test_tg_round_trip(self):
        rng = np.random.default_rng(2)
        W, _ = np.linalg.qr(rng.standard_normal((8, 3)))
        lmap = LayerMap(W, TG)
        h_star = rng.standard_normal(3)
        sol = gamma_inverse(lmap, gamma(lmap, h_star))
        assert sol.converged
        assert np.max(np.abs(sol.h - h_star)) < 1e-8

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_feature_recovery(self, kind):
        lmap, Z = prior_problem(kind, 16, 4, seed=3, S=50)
        sol = gamma_inverse(lmap, Z)
        assert sol.all_converged
        np.testing.assert_allclose(sol.x_hat, mean_lambda(kind, sol.theta))
        assert np.max(np.abs(sol.x_hat @ lmap.W - Z)) <= 1e-10

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("N", [8, 32, 128])
    def test_scale_robustness(self, kind, N):
        for M in sorted({2, N // 4, N // 2}):
            lmap, Z = prior_problem(kind, N, M, seed=N + M, S=5)
            sol = gamma_inverse(lmap, Z)
            assert sol.all_converged, (kind, N, M, sol.residual_inf)

    @pytest.mark.parametrize("kind", [TED, TG, EXP])
    def test_monotone_residual(self, kind):
        lmap, Z = prior_problem(kind, 20, 5, seed=4, S=10)
        sol = gamma_inverse(lmap, Z, trace=True)
        for hist in sol.history:
            assert np.all(np.diff(hist) <= 0)

    def test_ted_infeasible(self):
        W = np.abs(np.random.default_rng(5).standard_normal((6, 2)))
        z = W.T @ np.full(6, 1.5)
        sol = gamma_inverse(LayerMap(W, TED), z)
        assert not sol.converged
        assert sol.residual_inf > 1e-3

    def test_exp_negative_feature_infeasible(self):
        sol = gamma_inverse(LayerMap(np.ones((3, 1)), EXP), np.array([-1.0]))
        assert not sol.converged

    def test_batch_matches_single(self):
        lmap, Z = prior_problem(TG, 10, 3, seed=6, S=4)
        batch = gamma_inverse(lmap, Z)
        for s in range(4):
            one = gamma_inverse(lmap, Z[s])
            np.testing.assert_allclose(one.h, batch.h[s], rtol=1e-12, atol=1e-14)

    def test_rejects_bad_input(self):
        lmap = LayerMap(np.ones((3, 1)), TG)
        with pytest.raises(InvalidInput):
            gamma_inverse(lmap, np.array([np.nan]))
        with pytest.raises(InvalidInput):
            gamma_inverse(lmap, np.array([1.0, 2.0]))

    def test_config_validation(self):
        with pytest.raises(InvalidInput):
            SolverConfig(tol=0.0)
        with pytest.raises(InvalidInput):
            SolverConfig(max_iter=0)


class TestProportionality:
    @pytest.mark.parametrize("kind", [TED, TG, EXP])
    def test_log_ratio_constant_on_manifold(self, kind):
        lmap, Z = prior_problem(kind, 6, 2, seed=7)
        z = Z[0]
        sol = gamma_inverse(lmap, z, SolverConfig(tol=1e-12))
        xs = run_chain(lmap, z, n_samples=40, thin=25, burn_in=100, rng=RngStream(7))
        def log_ratio(x):
            surrogate = np.sum(log_density(kind, sol.theta, x), axis=-1)
            prior = np.sum(log_density(kind, lmap.theta0, x), axis=-1)
            return surrogate - prior
        r = log_ratio(xs)
        assert np.max(np.abs(r - r[0])) <= 1e-9


class TestJacobians:
    def test_linear(self):
        W = np.random.default_rng(8).standard_normal((5, 2))
        lmap = LayerMap(W, LINEAR)
        dh, dx = solution_jacobians(lmap, gamma_inverse(lmap, np.ones(2)))
        G_inv = np.linalg.inv(W.T @ W)
        np.testing.assert_allclose(dh, G_inv, rtol=1e-12)
        np.testing.assert_allclose(dx, W @ G_inv, rtol=1e-12)

    def test_ted_identity(self):
        lmap = LayerMap(np.eye(2), TED)
        dh, _ = solution_jacobians(lmap, gamma_inverse(lmap, np.array([0.5, 0.5])))
        np.testing.assert_allclose(dh, 12 * np.eye(2), rtol=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_finite_differences(self, kind):
        lmap, Z = prior_problem(kind, 12, 3, seed=9)
        z = Z[0]
        cfg = SolverConfig(tol=1e-13)
        sol = gamma_inverse(lmap, z, cfg)
        dh, dx = solution_jacobians(lmap, sol)
        step = 1e-6
        fd_h = np.empty_like(dh)
        fd_x = np.empty_like(dx)
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            p, m = gamma_inverse(lmap, z + e, cfg), gamma_inverse(lmap, z - e, cfg)
            fd_h[:, j] = (p.h - m.h) / (2 * step)
            fd_x[:, j] = (p.x_hat - m.x_hat) / (2 * step)
        assert np.max(np.abs(dh - fd_h)) / np.max(np.abs(dh)) < 1e-5
        assert np.max(np.abs(dx - fd_x)) / np.max(np.abs(dx)) < 1e-5
        np.testing.assert_allclose(lmap.W.T @ dx, np.eye(3), atol=1e-10)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_vjp_matches_dense(self, kind):
        lmap, Z = prior_problem(kind, 12, 3, seed=10)
        sol = gamma_inverse(lmap, Z[0])
        _, dx = solution_jacobians(lmap, sol)
        v = np.random.default_rng(10).standard_normal(12)
        np.testing.assert_allclose(vjp_through_inverse(lmap, sol, v), dx.T @ v, atol=1e-10)
        np.testing.assert_array_equal(vjp_through_inverse(lmap, sol, np.zeros(12)), np.zeros(3))

    def test_vjp_linear_is_least_squares_adjoint(self):
        W = np.random.default_rng(11).standard_normal((6, 2))
        lmap = LayerMap(W, LINEAR)
        v = np.arange(6.0)
        got = vjp_through_inverse(lmap, gamma_inverse(lmap, np.ones(2)), v)
        np.testing.assert_allclose(got, np.linalg.solve(W.T @ W, W.T @ v), rtol=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_weight_gradient(self, kind):
        # d/dW of c' theta(W) at fixed z, against central differences
        lmap, Z = prior_problem(kind, 7, 2, seed=12)
        z = Z[0]
        cfg = SolverConfig(tol=1e-13)
        c = np.random.default_rng(12).standard_normal(7)
        sol = gamma_inverse(lmap, z, cfg)
        _, grad_W = inverse_vjp(lmap, sol, c)

        def f(W):
            return c @ gamma_inverse(LayerMap(W, kind), z, cfg).theta

        fd = np.empty_like(lmap.W)
        step = 1e-6
        for idx in np.ndindex(*lmap.W.shape):
            Wp, Wm = lmap.W.copy(), lmap.W.copy()
            Wp[idx] += step
            Wm[idx] -= step
            fd[idx] = (f(Wp) - f(Wm)) / (2 * step)
        assert np.max(np.abs(grad_W - fd)) / np.max(np.abs(fd)) < 1e-6

    def test_not_converged_rejected(self):
        W = np.ones((3, 1))
        lmap = LayerMap(W, TED)
        sol = gamma_inverse(lmap, np.array([5.0]))
        with pytest.raises(InvalidInput):
            solution_jacobians(lmap, sol)
