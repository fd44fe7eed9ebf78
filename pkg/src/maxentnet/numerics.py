"""Dense linear algebra, special functions and random streams.

Everything here is plain numpy/scipy underneath.  The wrappers pin down the
conventions the rest of the package relies on: the sign of null-space bases,
the pivot threshold of SPD solves and the random generator algorithm.
"""
import math

import numpy as np
import scipy.linalg
from scipy import special

from .errors import InvalidInput, NotPositiveDefinite, RankDeficient

__all__ = [
    "RngStream",
    "as_matrix",
    "null_space_basis",
    "scaled_erfc",
    "spd_solve",
    "cholesky_factor",
    "std_normal_cdf",
    "std_normal_logcdf",
    "std_normal_pdf",
]

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)

# relative pivot threshold of cholesky_factor
PIVOT_RTOL = 1e-12


def as_matrix(a, name="matrix"):
    """Return `a` as a finite 2-d float64 array or raise InvalidInput."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def null_space_basis(W):
    """Orthonormal basis of the orthogonal complement of the columns of `W`.

    Parameters
    ----------
    W : array of shape (N, M), full column rank, M <= N

    Returns
    -------
    B : array of shape (N, N - M)
        ``B.T @ B = I`` and ``W.T @ B = 0``.  The first entry of each column
        whose magnitude exceeds 1e-12 is positive, so the result does not
        depend on LAPACK sign choices.
    """
    W = as_matrix(W, "W")
    N, M = W.shape
    if M > N:
        raise RankDeficient(N, M)
    rank = np.linalg.matrix_rank(W)
    if rank < M:
        raise RankDeficient(int(rank), M)
    Q, _ = np.linalg.qr(W, mode="complete")
    B = np.array(Q[:, M:])
    for j in range(B.shape[1]):
        col = B[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            B[:, j] = -col
    return B


def cholesky_factor(A):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefinite when the factorization fails or any pivot
    ``L[i, i]**2`` falls below ``PIVOT_RTOL * max(diag(A))``.
    """
    A = np.asarray(A, dtype=np.float64)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    scale = np.max(np.diagonal(A, axis1=-2, axis2=-1), axis=-1, keepdims=True)
    if not np.all(pivots >= PIVOT_RTOL * scale):
        raise NotPositiveDefinite(
            f"pivot {pivots.min():.3g} below {PIVOT_RTOL:g} x largest diagonal"
        )
    return L


def spd_solve(A, rhs):
    """Solve ``A v = rhs`` for symmetric positive definite `A`."""
    A = as_matrix(A, "A")
    rhs = np.asarray(rhs, dtype=np.float64)
    if A.shape[0] != A.shape[1] or A.shape[0] != rhs.shape[0]:
        raise InvalidInput(f"shape mismatch: A {A.shape}, rhs {rhs.shape}")
    L = cholesky_factor(A)
    return scipy.linalg.cho_solve((L, True), rhs)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x):
    """Phi(x); the left tail is formed from erfcx to keep relative accuracy."""
    x = np.asarray(x, dtype=np.float64)
    neg = np.minimum(x, 0.0)
    left = 0.5 * special.erfcx(-neg / _SQRT2) * np.exp(-0.5 * neg * neg)
    out = np.where(x < 0, left, special.ndtr(x))
    return out[()] if out.ndim == 0 else out


def std_normal_logcdf(x):
    return special.log_ndtr(x)


def scaled_erfc(x):
    """``exp(x**2) * erfc(x)``, finite for all x >= -26."""
    return special.erfcx(x)


class RngStream:
    """Seeded random stream with splittable children.

    Backed by numpy's PCG64 bit generator seeded through ``SeedSequence``;
    ``spawn`` derives statistically independent child streams, which is how
    parallel chains get their own randomness.  ``position`` counts the
    variates handed out so far.
    """

    def __init__(self, seed=0, *, _seed_seq=None):
        if _seed_seq is None:
            seed = int(seed)
            if not 0 <= seed < 2**64:
                raise InvalidInput("seed must be a 64-bit unsigned integer")
            _seed_seq = np.random.SeedSequence(seed)
        self.seed = seed
        self._seed_seq = _seed_seq
        self._gen = np.random.Generator(np.random.PCG64(_seed_seq))
        self.position = 0

    def spawn(self, n):
        return [
            RngStream(self.seed, _seed_seq=child) for child in self._seed_seq.spawn(n)
        ]

    def _count(self, size):
        self.position += 1 if size is None else int(np.prod(size))

    def uniform(self, size=None):
        """Uniform variates on the open interval (0, 1)."""
        self._count(size)
        u = self._gen.random(size)
        # the generator's range is [0, 1); map the zero onto the other end
        u = np.where(u == 0.0, 1.0 - 2.0**-53, u)
        return float(u) if size is None else u

    def normal(self, size=None):
        self._count(size)
        return self._gen.standard_normal(size)

    def integers(self, high, size=None):
        self._count(size)
        return self._gen.integers(high, size=size)

    def permutation(self, n):
        self._count(n)
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, position={self.position})"
