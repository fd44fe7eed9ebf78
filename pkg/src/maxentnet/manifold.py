"""Exact sampling of the posterior on the feature manifold {x : W'x = z}.

Given a feature z, every input consistent with it lies on the affine set
``x_p + span(B)`` where B spans the orthogonal complement of the columns of
W.  The posterior is the prior restricted to that set (and to the prior's
support).  Hit-and-run moves along one basis column of B at a time: the
feasible segment through the current point is computed, and the line
coordinate is drawn exactly from the prior restricted to the segment, which
is a truncated normal (quadratic log prior) or a truncated exponential
(linear log prior).  One sweep visits every column of B in order.

The chains here are vectorized over a leading axis, so many chains (or many
independent problem instances of the same shape) advance together.
"""
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize
from scipy.integrate import simpson

from . import _kernels
from .errors import BoundaryState, InfeasibleStart, InvalidInput, OracleUnavailable
from .expfamily import ActivationKind, truncexp_ppf, truncnorm_ppf
from .numerics import RngStream
from .saddle import LayerMap, SolverConfig, gamma_inverse

__all__ = [
    "ChainState",
    "feasible_segment",
    "hit_and_run_step",
    "run_chain",
    "run_chains",
    "gaussian_manifold_sample",
    "conditional_mean_oracle",
]

REPROJECT_EVERY = 1000
DEFAULT_BURN_IN = 1000
# half-width of the integration box, in prior standard deviations
ORACLE_GAUSS_RADIUS = 12.0
# log-density drop at which an unbounded linear-prior region is cut off
ORACLE_LINEAR_DROP = 60.0


def _support_bounds(support):
    if isinstance(support, tuple):
        return support
    return ActivationKind.parse(support).support


def _segments(X, D, lo, hi):
    """Feasible parameter interval of ``X + t D`` for stacked rows."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = np.full(X.shape[0], -np.inf)
        t_hi = np.full(X.shape[0], np.inf)
        pos = D > 0
        neg = D < 0
        if math.isfinite(lo):
            r = (lo - X) / D
            t_lo = np.maximum(t_lo, np.where(pos, r, -np.inf).max(axis=1))
            t_hi = np.minimum(t_hi, np.where(neg, r, np.inf).min(axis=1))
        if math.isfinite(hi):
            r = (hi - X) / D
            t_hi = np.minimum(t_hi, np.where(pos, r, np.inf).min(axis=1))
            t_lo = np.maximum(t_lo, np.where(neg, r, -np.inf).max(axis=1))
    return t_lo, t_hi


def feasible_segment(x, direction, support):
    """Open interval ``(t_lo, t_hi)`` of t with ``x + t*direction`` in the support.

    `support` is an ActivationKind (or its tag) or a ``(lower, upper)`` pair.
    Unbounded ends are returned as infinities.
    """
    lo, hi = _support_bounds(support)
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if not np.any(d):
        raise InvalidInput("direction must be nonzero")
    if not np.all((x > lo) & (x < hi)):
        raise BoundaryState("point is not strictly inside the support")
    t_lo, t_hi = _segments(x[None, :], d[None, :], lo, hi)
    return float(t_lo[0]), float(t_hi[0])


def _line_draw(X, b, theta0, kind, u, t_lo, t_hi):
    """Draw the step along `b` from the prior restricted to the segment."""
    bn2 = np.einsum("cn,cn->c", b, b)
    if kind.quad_coeff == 0.0:
        slope = np.einsum("cn,cn->c", theta0, b)
        return truncexp_ppf(slope, t_lo, t_hi, u)
    # quadratic coefficient -1/2: Gaussian in t with precision |b|^2
    sd = 1.0 / np.sqrt(bn2)
    mean = (np.einsum("cn,cn->c", theta0, b) - np.einsum("cn,cn->c", X, b)) / bn2
    s = truncnorm_ppf((t_lo - mean) / sd, (t_hi - mean) / sd, u)
    return np.clip(mean + sd * s, t_lo, t_hi)


def _sweep(X, B, theta0, kind, U):
    """One sweep over the columns of B for stacked chains; returns new X."""
    lo, hi = kind.support
    for j in range(B.shape[2]):
        b = B[:, :, j]
        t_lo, t_hi = _segments(X, b, lo, hi)
        t = _line_draw(X, b, theta0, kind, U[:, j], t_lo, t_hi)
        Xn = X + t[:, None] * b
        # rounding can land a coordinate exactly on the boundary; such a move
        # is dropped (a probability-zero event in exact arithmetic)
        ok = np.all((Xn > lo) & (Xn < hi), axis=1)
        X = np.where(ok[:, None], Xn, X)
    return X


@dataclass
class ChainState:
    """A point on the manifold plus everything needed to advance it."""

    x: np.ndarray
    B: np.ndarray
    z: np.ndarray
    kind: ActivationKind
    rng: RngStream
    steps_taken: int = 0
    theta0: np.ndarray = None

    def __post_init__(self):
        self.kind = ActivationKind.parse(self.kind)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(self.x.size, -1)
        if self.theta0 is None:
            self.theta0 = np.full(self.x.size, self.kind.theta0)
        if not self.kind.in_support(self.x):
            raise BoundaryState("chain state is not strictly inside the support")

    @classmethod
    def start(cls, map, z, x0, rng):
        """Validated initial state for the posterior of `map` at feature `z`."""
        x0 = np.asarray(x0, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if x0.shape != (map.shape[0],):
            raise InfeasibleStart(f"x0 has shape {x0.shape}, expected ({map.shape[0]},)")
        gap = np.abs(x0 @ map.W - z).max(initial=0.0)
        if not gap <= 1e-9 * max(1.0, np.abs(z).max(initial=0.0)):
            raise InfeasibleStart(f"x0 is off the manifold by {gap:.3g}")
        if not map.kind.in_support(x0):
            raise InfeasibleStart("x0 is not strictly inside the support")
        return cls(x0, map.null_basis, z, map.kind, rng, 0, map.theta0)


def hit_and_run_step(state):
    """Advance the chain by one sweep over the columns of its basis."""
    K = state.B.shape[1]
    if K == 0:
        return replace(state, steps_taken=state.steps_taken + 1)
    if not state.kind.in_support(state.x):
        raise BoundaryState("chain state is not strictly inside the support")
    U = np.atleast_1d(state.rng.uniform(K))[None, :]
    X = _sweep(state.x[None, :], state.B[None], state.theta0[None, :], state.kind, U)
    return replace(state, x=X[0], steps_taken=state.steps_taken + 1)


def run_chains(maps, zs, x0s, burn_in, n_samples, thin, rngs):
    """Run one hit-and-run chain per (map, z, x0, rng), all of the same shape.

    Returns an array of shape (n_chains, n_samples, N).  Chain c consumes
    only ``rngs[c]``, so its output does not depend on the other chains.
    """
    if burn_in < 0 or n_samples < 0 or thin < 1:
        raise InvalidInput("burn_in and n_samples must be >= 0, thin >= 1")
    kinds = {m.kind for m in maps}
    shapes = {m.shape for m in maps}
    if len(kinds) != 1 or len(shapes) != 1:
        raise InvalidInput("chains must share kind and shape")
    kind = kinds.pop()
    N, M = shapes.pop()
    K = N - M
    states = [ChainState.start(m, z, x0, r) for m, z, x0, r in zip(maps, zs, x0s, rngs)]
    X = np.stack([s.x for s in states]).copy()
    C = X.shape[0]
    out = np.empty((C, n_samples, N))
    if K == 0:
        out[:] = X[:, None, :]
        return out
    B = np.ascontiguousarray(np.stack([m.null_basis for m in maps]))
    W = np.stack([m.W for m in maps])
    Z = np.stack([np.asarray(z, dtype=np.float64) for z in zs])
    gram_inv = np.stack([np.linalg.inv(m.W.T @ m.W) for m in maps])
    theta0 = np.stack([m.theta0 for m in maps])
    lo, hi = kind.support

    total = burn_in + n_samples * thin
    kept = 0
    done = 0
    while done < total:
        nb = min(REPROJECT_EVERY - done % REPROJECT_EVERY, total - done)
        U = np.stack([r.uniform((nb, K)) for r in rngs], axis=1)
        trace = np.empty((nb, C, N))
        _kernels.sweeps(X, B, theta0, kind.quad_coeff, lo, hi, U, trace)
        steps = done + 1 + np.arange(nb)
        keep = (steps > burn_in) & ((steps - burn_in) % thin == 0)
        n_keep = int(keep.sum())
        out[:, kept:kept + n_keep] = np.swapaxes(trace[keep], 0, 1)
        kept += n_keep
        done += nb
        if done % REPROJECT_EVERY == 0:
            drift = np.einsum("cnm,cn->cm", W, X) - Z
            Xp = X - np.einsum("cnm,cmk,ck->cn", W, gram_inv, drift)
            ok = np.all((Xp > lo) & (Xp < hi), axis=1)
            X = np.ascontiguousarray(np.where(ok[:, None], Xp, X))
    return out


def run_chain(map, z, x0=None, burn_in=DEFAULT_BURN_IN, n_samples=1000, thin=1, rng=None):
    """Samples from the posterior on the manifold of `z`.

    `x0` defaults to the surrogate mean from gamma_inverse, which lies on
    the manifold and strictly inside the support.  The LINEAR kind is
    sampled in closed form instead of by a chain.
    """
    rng = rng if rng is not None else RngStream(0)
    z = np.asarray(z, dtype=np.float64)
    if map.kind is ActivationKind.LINEAR:
        return gaussian_manifold_sample(map, z, rng, n_samples)
    if x0 is None:
        sol = gamma_inverse(map, z, SolverConfig(tol=1e-12))
        if not sol.converged:
            raise InfeasibleStart(
                f"feature is outside the image of gamma (residual {sol.residual_inf:.3g})"
            )
        x0 = sol.x_hat
    return run_chains([map], [z], [x0], burn_in, n_samples, thin, [rng])[0]


def gaussian_manifold_sample(map, z, rng, n):
    """Closed-form posterior draws ``x_hat + B u`` with ``u ~ N(0, I)``."""
    if map.kind is not ActivationKind.LINEAR:
        raise InvalidInput("closed-form manifold sampling needs the LINEAR kind")
    sol = gamma_inverse(map, np.asarray(z, dtype=np.float64))
    B = map.null_basis
    u = rng.normal((n, B.shape[1]))
    return sol.x_hat[None, :] + u @ B.T


def _constraints(map, x_p, B):
    """Rows of ``A u <= c`` describing the support on the manifold."""
    lo, hi = map.kind.support
    A, c = [], []
    if math.isfinite(lo):
        A.append(-B)
        c.append(x_p - lo)
    if math.isfinite(hi):
        A.append(B)
        c.append(hi - x_p)
    if not A:
        return np.zeros((0, B.shape[1])), np.zeros(0)
    return np.vstack(A), np.concatenate(c)


def _axis_range(A, c, axis):
    K = A.shape[1]
    bounds = []
    for sign in (1.0, -1.0):
        obj = np.zeros(K)
        obj[axis] = sign
        res = scipy.optimize.linprog(obj, A_ub=A, b_ub=c, bounds=[(None, None)] * K, method="highs")
        if res.status == 3:
            raise OracleUnavailable("integration region is unbounded")
        if res.status != 0:
            raise OracleUnavailable(f"feasible region is empty ({res.message})")
        bounds.append(sign * res.fun)
    return bounds[0], bounds[1]


def conditional_mean_oracle(map, z, grid=2001):
    """Posterior mean on the manifold by brute-force quadrature.

    The manifold is parameterized as ``x = x_p + B u`` with u of dimension
    ``N - M <= 2``.  The log prior is quadratic or linear in u; unbounded
    regions are cut where the density has fallen by many orders of
    magnitude.  Each axis uses a composite Simpson rule on `grid` points
    between the exact boundaries of the feasible region.
    """
    N, M = map.shape
    K = N - M
    if K > 2:
        raise OracleUnavailable("quadrature oracle is restricted to N - M <= 2")
    if grid < 3:
        raise InvalidInput("grid must have at least 3 points")
    grid = grid + 1 - grid % 2
    z = np.asarray(z, dtype=np.float64)
    x_p = map.W @ map.least_squares(z)
    if K == 0:
        return x_p
    B = map.null_basis
    q = map.kind.quad_coeff
    g = B.T @ (map.theta0 + 2.0 * q * x_p)
    A, c = _constraints(map, x_p, B)
    if q < 0:
        center = g / (-2.0 * q)
        box = ORACLE_GAUSS_RADIUS / math.sqrt(-2.0 * q)
        A = np.vstack([A, np.eye(K), -np.eye(K)])
        c = np.concatenate([c, center + box, box - center])
    elif not math.isfinite(map.kind.support[1]):
        res = scipy.optimize.linprog(-g, A_ub=A, b_ub=c, bounds=[(None, None)] * K, method="highs")
        if res.status != 0:
            raise OracleUnavailable("prior is not integrable on the manifold")
        A = np.vstack([A, -g[None, :]])
        c = np.concatenate([c, [-(-res.fun - ORACLE_LINEAR_DROP)]])

    def logp(U):
        return U @ g + q * np.einsum("...k,...k->...", U, U)

    a0, b0 = _axis_range(A, c, 0)
    u0 = np.linspace(a0, b0, grid)
    if K == 1:
        lp = logp(u0[:, None])
        w = np.exp(lp - lp.max())
        mean_u = np.array([simpson(w * u0, x=u0) / simpson(w, x=u0)])
    else:
        # inner interval of u1 for each u0 from the rows of A u <= c
        a_0, a_1 = A[:, 0], A[:, 1]
        rhs = c[None, :] - u0[:, None] * a_0[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = rhs / a_1[None, :]
        up = np.where(a_1 > 0, r, np.inf).min(axis=1)
        dn = np.where(a_1 < 0, r, -np.inf).max(axis=1)
        flat_ok = np.all(np.where(a_1 == 0, rhs >= 0, True), axis=1)
        width = np.where(flat_ok, np.maximum(up - dn, 0.0), 0.0)
        dn = np.where(width > 0, dn, 0.0)
        s = np.linspace(0.0, 1.0, grid)
        U1 = dn[:, None] + width[:, None] * s[None, :]
        U0 = np.broadcast_to(u0[:, None], U1.shape)
        lp = logp(np.stack([U0, U1], axis=-1))
        lp = np.where(width[:, None] > 0, lp, -np.inf)
        w = np.exp(lp - lp.max())
        inner = simpson(w, x=s, axis=1) * width
        inner_u1 = simpson(w * U1, x=s, axis=1) * width
        mass = simpson(inner, x=u0)
        mean_u = np.array([simpson(inner * u0, x=u0), simpson(inner_u1, x=u0)]) / mass
    return x_p + B @ mean_u
