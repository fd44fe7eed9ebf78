"""The layer map gamma(h) = W' lambda(theta0 + W h) and its inverse.

Inverting gamma means solving the saddle-point equation

    W' lambda(theta0 + W h) = z

for h.  The left side is the gradient of the strictly convex function
``sum_i log Z(theta0_i + (W h)_i)``, so its Jacobian ``W' D W`` with
``D = diag(lambda'(theta0 + W h))`` is symmetric positive definite and a
damped Newton iteration converges from any starting point in the domain.

The solver is vectorized over a leading batch axis of `z`; a single feature
vector is just a batch of one.  Derivatives of the solution follow from the
implicit function theorem and need only one SPD solve per sample.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import DomainViolation, InvalidInput, NotPositiveDefinite
from .expfamily import ActivationKind, lambda_prime, mean_lambda
from .numerics import as_matrix, cholesky_factor, null_space_basis

__all__ = [
    "LayerMap",
    "SolverConfig",
    "SaddleSolution",
    "gamma",
    "gamma_inverse",
    "solution_jacobians",
    "vjp_through_inverse",
    "inverse_vjp",
]

DIVERGENCE_BOUND = 1e8
MAX_HALVINGS = 60


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 200
    initial_damping: float = 1.0
    domain_backtrack_fraction: float = 0.9

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidInput("tol must be positive")
        if self.max_iter < 1:
            raise InvalidInput("max_iter must be at least 1")
        if not 0 < self.initial_damping <= 1:
            raise InvalidInput("initial_damping must lie in (0, 1]")
        if not 0 < self.domain_backtrack_fraction < 1:
            raise InvalidInput("domain_backtrack_fraction must lie in (0, 1)")


class LayerMap:
    """A dimension-reducing layer: weights `W` (N x M), prior kind, theta0."""

    def __init__(self, W, kind, theta0=None):
        self.W = as_matrix(W, "W")
        self.kind = ActivationKind.parse(kind)
        N, M = self.W.shape
        if M > N:
            raise InvalidInput(f"W must have at least as many rows as columns, got {self.W.shape}")
        if theta0 is None:
            theta0 = np.full(N, self.kind.theta0)
        theta0 = np.broadcast_to(np.asarray(theta0, dtype=np.float64), (N,)).copy()
        if not np.all(theta0 < self.kind.theta_upper):
            raise DomainViolation(f"theta0 outside the {self.kind.value} domain")
        self.theta0 = theta0

    @property
    def shape(self):
        return self.W.shape

    @cached_property
    def gram_factor(self):
        return cholesky_factor(self.W.T @ self.W)

    @cached_property
    def null_basis(self):
        return null_space_basis(self.W)

    def least_squares(self, z):
        """``(W'W)^{-1} z`` along the last axis of `z`."""
        z = np.asarray(z, dtype=np.float64)
        return scipy.linalg.cho_solve((self.gram_factor, True), z.T).T

    def natural_params(self, h):
        return self.theta0 + np.asarray(h) @ self.W.T

    def __repr__(self):
        N, M = self.shape
        return f"LayerMap(N={N}, M={M}, kind={self.kind.value})"


@dataclass
class SaddleSolution:
    """Result of gamma_inverse.

    For a batch of features every field carries the batch as leading axis.
    """

    h: np.ndarray
    x_hat: np.ndarray
    residual_inf: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    theta: np.ndarray = field(default=None, repr=False)
    history: list = field(default=None, repr=False)

    @property
    def all_converged(self):
        return bool(np.all(self.converged))


def _check_domain(kind, theta):
    ok = theta < kind.theta_upper
    if not np.all(ok):
        idx = int(np.flatnonzero(~ok.ravel())[0] % theta.shape[-1])
        raise DomainViolation(f"natural parameter leaves the {kind.value} domain at coordinate {idx}", index=idx)


def gamma(map, h):
    """``W' lambda(theta0 + W h)``; `h` may carry a leading batch axis."""
    h = np.asarray(h, dtype=np.float64)
    theta = map.natural_params(h)
    _check_domain(map.kind, theta)
    return mean_lambda(map.kind, theta) @ map.W


def _residual(map, theta, Z):
    return np.asarray(mean_lambda(map.kind, theta)) @ map.W - Z


def _gram(map, theta):
    D = np.asarray(lambda_prime(map.kind, theta))
    return np.einsum("ni,sn,nj->sij", map.W, D, map.W), D


def _max_domain_step(map, theta, dtheta, frac):
    """Largest step fraction (capped at 1) keeping theta inside the domain."""
    upper = map.kind.theta_upper
    if not np.isfinite(upper):
        return np.ones(theta.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(dtheta > 0, (upper - theta) / dtheta, np.inf)
    s = room.min(axis=1)
    return np.where(s <= 1.0, frac * s, 1.0)


def gamma_inverse(map, z, cfg=None, *, h0=None, trace=False):
    """Solve ``W' lambda(theta0 + W h) = z`` by damped Newton.

    Parameters
    ----------
    map : LayerMap
    z : array of shape (M,) or (S, M)
    cfg : SolverConfig, optional
    h0 : array, optional
        Warm start.  Defaults to the linearization of the equation around
        ``h = 0``, which is exact for the LINEAR kind.
    trace : bool
        Record the 2-norm of the residual after every accepted iterate in
        ``solution.history`` (one list per sample).

    Returns
    -------
    SaddleSolution
        ``converged`` is false when the iteration stalls, hits ``max_iter`` or
        ``|h|`` exceeds 1e8; that is how features outside the image of gamma
        show up.
    """
    cfg = cfg or SolverConfig()
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    N, M = map.shape
    if Z.shape[-1] != M:
        raise InvalidInput(f"feature has length {Z.shape[-1]}, layer expects {M}")
    if not np.all(np.isfinite(Z)):
        raise InvalidInput("feature contains non-finite entries")
    S = Z.shape[0]
    kind = map.kind

    if h0 is None:
        G0, _ = _gram(map, map.theta0[None, :])
        F0 = _residual(map, map.theta0[None, :], Z)
        H = -np.linalg.solve(G0, F0[..., None])[..., 0] if M else np.zeros((S, 0))
        theta = map.natural_params(H)
        bad = ~np.all(theta < kind.theta_upper, axis=1)
        H[bad] = 0.0
    else:
        H = np.array(np.broadcast_to(np.asarray(h0, dtype=np.float64), (S, M)))
    theta = map.natural_params(H)
    _check_domain(kind, theta)
    F = _residual(map, theta, Z)
    res2 = np.linalg.norm(F, axis=1)
    resinf = np.abs(F).max(axis=1) if M else np.zeros(S)
    iters = np.zeros(S, dtype=int)
    done = resinf <= cfg.tol
    failed = np.zeros(S, dtype=bool)
    history = [[float(r)] for r in res2] if trace else None

    for _ in range(cfg.max_iter):
        active = ~(done | failed)
        if not active.any():
            break
        idx = np.flatnonzero(active)
        th, Fa = theta[idx], F[idx]
        G, _ = _gram(map, th)
        L, spd = _try_cholesky(G)
        if not spd.all():
            # Gram matrix too ill-conditioned: theta is running into the
            # boundary of the domain, i.e. z is at or beyond the image edge
            failed[idx[~spd]] = True
            idx, th, Fa, L = idx[spd], th[spd], Fa[spd], L[spd]
            if idx.size == 0:
                break
        step = -_cho_solve_batch(L, Fa)
        dtheta = step @ map.W.T
        s = cfg.initial_damping * _max_domain_step(
            map, th, dtheta, cfg.domain_backtrack_fraction
        )
        pending = np.ones(idx.size, dtype=bool)
        new_theta, new_F = th.copy(), Fa.copy()
        for _ in range(MAX_HALVINGS):
            p = np.flatnonzero(pending)
            trial = th[p] + s[p, None] * dtheta[p]
            ok_dom = np.all(trial < kind.theta_upper, axis=1)
            Ft = np.full((p.size, M), np.inf)
            if ok_dom.any():
                Ft[ok_dom] = _residual(map, trial[ok_dom], Z[idx[p[ok_dom]]])
            better = np.linalg.norm(Ft, axis=1) < res2[idx[p]]
            acc = p[better]
            new_theta[acc] = trial[better]
            new_F[acc] = Ft[better]
            pending[acc] = False
            s[p[~better]] *= 0.5
            if not pending.any():
                break
        accepted = ~pending
        a_idx = idx[accepted]
        H[a_idx] += s[accepted, None] * step[accepted]
        theta[a_idx] = new_theta[accepted]
        F[a_idx] = new_F[accepted]
        iters[a_idx] += 1
        res2[a_idx] = np.linalg.norm(F[a_idx], axis=1)
        resinf[a_idx] = np.abs(F[a_idx]).max(axis=1)
        if trace:
            for i in a_idx:
                history[i].append(float(res2[i]))
        done |= resinf <= cfg.tol
        # a step that cannot reduce the residual means we are at the noise floor
        # or pushing against the boundary of the image
        failed[idx[pending]] = True
        failed |= np.abs(H).max(axis=1, initial=0.0) > DIVERGENCE_BOUND

    converged = resinf <= cfg.tol
    x_hat = np.asarray(mean_lambda(kind, theta))
    sol = SaddleSolution(
        h=H[0] if single else H,
        x_hat=x_hat[0] if single else x_hat,
        residual_inf=float(resinf[0]) if single else resinf,
        iterations=int(iters[0]) if single else iters,
        converged=bool(converged[0]) if single else converged,
        theta=theta[0] if single else theta,
        history=(history[0] if single else history) if trace else None,
    )
    return sol


def _try_cholesky(G):
    """Batched cholesky_factor that flags, rather than raises on, bad samples."""
    try:
        return cholesky_factor(G), np.ones(G.shape[0], dtype=bool)
    except NotPositiveDefinite:
        pass
    L = np.zeros_like(G)
    ok = np.zeros(G.shape[0], dtype=bool)
    for i in range(G.shape[0]):
        try:
            L[i] = cholesky_factor(G[i])
            ok[i] = True
        except NotPositiveDefinite:
            pass
    return L, ok


def _cho_solve_batch(L, rhs):
    """Solve ``L L' x = rhs`` for stacked factors L (S, M, M) and rhs (S, M)."""
    y = np.linalg.solve(L, rhs[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def _require_converged(sol):
    if not np.all(sol.converged):
        raise InvalidInput("derivatives requested for a solve that did not converge")


def solution_jacobians(map, sol):
    """Exact derivatives of a converged solve with respect to z.

    Returns ``(dh_dz, dxhat_dz)`` with ``dh_dz = (W' D W)^{-1}`` and
    ``dxhat_dz = D W (W' D W)^{-1}``.
    """
    _require_converged(sol)
    theta = np.atleast_2d(sol.theta)
    G, D = _gram(map, theta)
    L = cholesky_factor(G)
    M = map.shape[1]
    eye = np.broadcast_to(np.eye(M), G.shape)
    dh = np.stack([_cho_solve_batch(L, eye[:, :, j]) for j in range(M)], axis=-1)
    dh = 0.5 * (dh + np.swapaxes(dh, -1, -2))
    dx = D[:, :, None] * np.einsum("nm,smk->snk", map.W, dh)
    if np.ndim(sol.h) == 1:
        return dh[0], dx[0]
    return dh, dx


def inverse_vjp(map, sol, cot_theta):
    """Pull a cotangent on ``theta = theta0 + W h`` back through the solve.

    The solution depends on the feature z and on the weights W (which enter
    both the saddle-point equation and ``W h``).  With ``v`` the cotangent on
    theta, ``q = (W' D W)^{-1} W' v`` and ``x_hat = lambda(theta)``:

        grad_z = q
        grad_W = sum over samples of v h' - x_hat q' - (D W q) h'

    `cot_theta` may carry a leading batch axis; grad_W is summed over it.
    """
    _require_converged(sol)
    theta = np.atleast_2d(sol.theta)
    V = np.atleast_2d(np.asarray(cot_theta, dtype=np.float64))
    H = np.atleast_2d(sol.h)
    X = np.atleast_2d(sol.x_hat)
    G, D = _gram(map, theta)
    L = cholesky_factor(G)
    Q = _cho_solve_batch(L, V @ map.W)
    grad_W = V.T @ H - X.T @ Q - (D * (Q @ map.W.T)).T @ H
    if np.ndim(cot_theta) == 1:
        return Q[0], grad_W
    return Q, grad_W


def vjp_through_inverse(map, sol, cotangent_on_xhat):
    """``dxhat_dz' v`` without forming the N x M Jacobian."""
    _require_converged(sol)
    v = np.asarray(cotangent_on_xhat, dtype=np.float64)
    D = np.asarray(lambda_prime(map.kind, sol.theta))
    q, _ = inverse_vjp(map, sol, D * v)
    return q
