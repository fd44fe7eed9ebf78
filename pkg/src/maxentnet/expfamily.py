"""Maximum-entropy priors and their mean (activation) functions.

Each kind is a one-parameter exponential family on its support with density

    p(x; theta) = exp(theta * x + b * x**2 - log Z(theta))

where ``b`` is fixed by the kind.  ``mean_lambda`` is the activation function
and ``lambda_prime`` its derivative, which equals the variance of the law.

==========  ===========  =====  =======  ========================
kind        support      b      theta0   activation
==========  ===========  =====  =======  ========================
TED         [0, 1]       0      0        sigmoid-like
TG          [0, inf)     -1/2   0        softplus-like
EXP         [0, inf)     0      -1       -1/theta, theta < 0
LINEAR      R            -1/2   0        identity
==========  ===========  =====  =======  ========================

All functions accept scalars or arrays and broadcast like numpy ufuncs.
"""
import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special

from .errors import DomainViolation, EmptyInterval, InvalidInput
from .numerics import LOG_SQRT_2PI, scaled_erfc, std_normal_cdf, std_normal_pdf

__all__ = [
    "ActivationKind",
    "UnivariateLaw",
    "mean_lambda",
    "lambda_prime",
    "log_partition",
    "log_density",
    "inverse_lambda",
    "sample",
    "sample_univariate",
    "truncated_interval_gaussian",
    "truncnorm_ppf",
    "truncexp_ppf",
    "relu_limit_mean",
]

# below this |theta| the TED mean and variance use their Bernoulli series;
# the closed forms lose up to six digits to cancellation near zero
TED_SERIES_CUTOFF = 1.0
_TED_LOGZ_CUTOFF = 1e-3
# lambda = 1/2 + sum_k B_2k theta^(2k-1) / (2k)!, twelve terms reach double
# precision for |theta| < 1
_B2K = [Fraction(1, 6), Fraction(-1, 30), Fraction(1, 42), Fraction(-1, 30),
        Fraction(5, 66), Fraction(-691, 2730), Fraction(7, 6), Fraction(-3617, 510),
        Fraction(43867, 798), Fraction(-174611, 330), Fraction(854513, 138),
        Fraction(-236364091, 2730)]
_TED_MEAN_COEF = np.array([float(b / math.factorial(2 * k)) for k, b in enumerate(_B2K, 1)])
_TED_VAR_COEF = _TED_MEAN_COEF * np.arange(1, 2 * len(_B2K), 2)
# below this theta the TG moments come from a continued fraction
TG_TAIL_CUTOFF = -4.0
_TG_CF_TERMS = 40
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class _KindInfo:
    quad_coeff: float
    lower: float
    upper: float
    theta0: float
    theta_upper: float  # exclusive bound of the natural parameter domain


_INFO = {
    "ted": _KindInfo(0.0, 0.0, 1.0, 0.0, math.inf),
    "tg": _KindInfo(-0.5, 0.0, math.inf, 0.0, math.inf),
    "exp": _KindInfo(0.0, 0.0, math.inf, -1.0, 0.0),
    "linear": _KindInfo(-0.5, -math.inf, math.inf, 0.0, math.inf),
}


class ActivationKind(str, enum.Enum):
    """Which prior/activation pair governs a layer."""

    TED = "ted"
    TG = "tg"
    EXP = "exp"
    LINEAR = "linear"

    @classmethod
    def parse(cls, tag):
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise InvalidInput(f"unknown activation kind {tag!r} (choose from {choices})") from None

    @property
    def quad_coeff(self):
        return _INFO[self.value].quad_coeff

    @property
    def support(self):
        info = _INFO[self.value]
        return info.lower, info.upper

    @property
    def theta0(self):
        return _INFO[self.value].theta0

    @property
    def theta_upper(self):
        return _INFO[self.value].theta_upper

    @property
    def code(self):
        """Integer tag used by the binary model format."""
        return list(ActivationKind).index(self)

    @classmethod
    def from_code(cls, code):
        kinds = list(cls)
        if not 0 <= code < len(kinds):
            raise InvalidInput(f"unknown kind code {code}")
        return kinds[code]

    def in_support(self, x, strict=True):
        lo, hi = self.support
        x = np.asarray(x)
        if strict:
            return np.all((x > lo) & (x < hi))
        return np.all((x >= lo) & (x <= hi))


@dataclass(frozen=True)
class UnivariateLaw:
    kind: ActivationKind
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ActivationKind.parse(self.kind))
        _check_theta(self.kind, self.theta)

    @property
    def mean(self):
        return float(mean_lambda(self.kind, self.theta))

    @property
    def variance(self):
        return float(lambda_prime(self.kind, self.theta))


def _check_theta(kind, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(np.isnan(theta)):
        raise InvalidInput("natural parameter is NaN")
    bad = ~(theta < kind.theta_upper)
    if np.any(bad):
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise DomainViolation(
            f"{kind.value}: natural parameter {theta.ravel()[idx]:.6g} at index {idx} "
            f"outside domain theta < {kind.theta_upper:g}",
            index=idx,
        )
    return theta


def _out(values, theta):
    return values if np.ndim(theta) else float(values)


def _tg_moments(theta):
    """Mean and variance of the TG law.

    Above the tail cutoff: lambda = theta + r, lambda' = 1 - r*lambda with
    r = N/Phi.  Below it both closed forms cancel catastrophically, so they
    come from Laplace's continued fraction for the Mills ratio, which gives
    with y = -theta

        lambda = 1/(y + 2 g3),  g_k = 1/(y + k g_(k+1)),  lambda' = lambda (2 g3 - lambda)
    """
    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        tail = theta < TG_TAIL_CUTOFF
        safe = np.where(tail, 0.0, theta)
        r = std_normal_pdf(safe) / std_normal_cdf(safe)
        mean = safe + r
        var = 1.0 - r * mean
        y = -np.where(tail, theta, TG_TAIL_CUTOFF)
        g = 1.0 / y
        for k in range(_TG_CF_TERMS, 2, -1):
            g = 1.0 / (y + k * g)
        tail_mean = 1.0 / (y + 2.0 * g)
        tail_var = tail_mean * (2.0 * g - tail_mean)
        return np.where(tail, tail_mean, mean), np.where(tail, tail_var, var)


def _poly_in_square(coef, t):
    """sum_k coef[k] * t**(2k) by Horner's rule."""
    t2 = t * t
    acc = np.zeros_like(t)
    for c in coef[::-1]:
        acc = acc * t2 + c
    return acc


def mean_lambda(kind, theta):
    """Mean of the law with natural parameter `theta` (the activation)."""
    kind = ActivationKind.parse(kind)
    t = _check_theta(kind, theta)
    if kind is ActivationKind.LINEAR:
        val = t.copy()
    elif kind is ActivationKind.EXP:
        val = -1.0 / t
    elif kind is ActivationKind.TG:
        val, _ = _tg_moments(t)
    else:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            small = np.abs(t) < TED_SERIES_CUTOFF
            ts = np.where(small, 1.0, t)
            exact = -1.0 / np.expm1(-ts) - 1.0 / ts
            series = 0.5 + t * _poly_in_square(_TED_MEAN_COEF, t)
            val = np.where(small, series, exact)
    return _out(val, theta)


def lambda_prime(kind, theta):
    """Derivative of the activation, equal to the variance of the law."""
    kind = ActivationKind.parse(kind)
    t = _check_theta(kind, theta)
    if kind is ActivationKind.LINEAR:
        val = np.ones_like(t)
    elif kind is ActivationKind.EXP:
        val = 1.0 / (t * t)
    elif kind is ActivationKind.TG:
        _, val = _tg_moments(t)
    else:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            small = np.abs(t) < TED_SERIES_CUTOFF
            ts = np.where(small, 1.0, t)
            exact = 1.0 / (ts * ts) - 0.25 / np.sinh(0.5 * ts) ** 2
            series = _poly_in_square(_TED_VAR_COEF, t)
            val = np.where(small, series, exact)
    return _out(val, theta)


def log_partition(kind, theta):
    """log Z(theta), the exact normalizer of ``exp(theta x + b x^2)``.

    TG uses ``log Phi(theta) - log N(theta)`` and LINEAR
    ``theta**2 / 2 + log sqrt(2 pi)``; no constant is dropped, so
    ``log_density`` integrates to one for every kind.
    """
    kind = ActivationKind.parse(kind)
    t = _check_theta(kind, theta)
    if kind is ActivationKind.LINEAR:
        val = 0.5 * t * t + LOG_SQRT_2PI
    elif kind is ActivationKind.EXP:
        val = -np.log(-t)
    elif kind is ActivationKind.TG:
        with np.errstate(over="ignore", invalid="ignore"):
            tail = t < TG_TAIL_CUTOFF
            tt = np.where(tail, t, TG_TAIL_CUTOFF)
            tail_val = np.log(0.5 * scaled_erfc(-tt / _SQRT2)) + LOG_SQRT_2PI
            tc = np.where(tail, 0.0, t)
            direct = special.log_ndtr(tc) + 0.5 * tc * tc + LOG_SQRT_2PI
            val = np.where(tail, tail_val, direct)
    else:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            small = np.abs(t) < _TED_LOGZ_CUTOFF
            ts = np.where(small, 1.0, t)
            pos = ts + np.log(-np.expm1(-ts)) - np.log(np.abs(ts))
            neg = np.log(-np.expm1(ts)) - np.log(np.abs(ts))
            exact = np.where(ts > 0, pos, neg)
            series = t / 2.0 + t * t / 24.0 - t**4 / 2880.0
            val = np.where(small, series, exact)
    return _out(val, theta)


def log_density(kind, theta, x):
    """Log density of the law at `x` (``-inf`` outside the support)."""
    kind = ActivationKind.parse(kind)
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    lo, hi = kind.support
    val = theta * x + kind.quad_coeff * x * x - np.asarray(log_partition(kind, theta))
    val = np.where((x >= lo) & (x <= hi), val, -np.inf)
    return val if val.ndim else float(val)


def inverse_lambda(kind, mean, tol=1e-14, max_iter=200):
    """Natural parameter whose law has the given mean."""
    kind = ActivationKind.parse(kind)
    m = np.asarray(mean, dtype=np.float64)
    lo_m, hi_m = kind.support
    if kind is ActivationKind.LINEAR:
        if not np.all(np.isfinite(m)):
            raise InvalidInput("mean must be finite")
        return _out(m.copy(), mean)
    if not np.all((m > lo_m) & (m < hi_m)):
        raise DomainViolation(f"{kind.value}: mean outside the open range ({lo_m:g}, {hi_m:g})")
    if kind is ActivationKind.EXP:
        return _out(-1.0 / m, mean)
    if kind is ActivationKind.TED:
        a, b = -1.0 / m, 1.0 / (1.0 - m)
    else:
        a, b = -1.0 / m, np.array(m, copy=True)
    a = np.array(a, dtype=np.float64, ndmin=1)
    b = np.array(b, dtype=np.float64, ndmin=1)
    mm = np.array(m, ndmin=1)
    t = 0.5 * (a + b)
    for _ in range(max_iter):
        f = mean_lambda(kind, t) - mm
        a = np.where(f < 0, t, a)
        b = np.where(f > 0, t, b)
        step = f / lambda_prime(kind, t)
        newton = t - step
        bad = ~((newton > a) & (newton < b))
        t_new = np.where(bad, 0.5 * (a + b), newton)
        done = np.abs(t_new - t) <= tol * np.maximum(1.0, np.abs(t))
        t = t_new
        if np.all(done):
            break
    return t.reshape(np.shape(m)) if np.ndim(mean) else float(t[0])


def truncnorm_ppf(lo, hi, u):
    """Quantile `u` of the standard normal restricted to ``[lo, hi]``.

    Works in log space on whichever tail the interval lies in, so intervals
    far out (``lo > 38`` where ``Phi(-lo)`` underflows) are handled.  Bounds
    may be infinite.
    """
    lo, hi, u = np.broadcast_arrays(
        np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64),
        np.asarray(u, dtype=np.float64),
    )
    out = np.empty(lo.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        upper = lo >= 0
        lower = hi <= 0
        mid = ~(upper | lower)
        if np.any(upper):
            out[upper] = _upper_tail_ppf(lo[upper], hi[upper], u[upper])
        if np.any(lower):
            out[lower] = -_upper_tail_ppf(-hi[lower], -lo[lower], 1.0 - u[lower])
        if np.any(mid):
            p_lo = special.ndtr(lo[mid])
            p_hi = special.ndtr(hi[mid])
            out[mid] = special.ndtri(p_lo + u[mid] * (p_hi - p_lo))
    out = np.clip(out, lo, hi)
    return out if out.ndim else float(out)


def _upper_tail_ppf(lo, hi, u):
    # survival function runs from sf(lo) down to sf(hi); u = 0 maps to lo
    log_sf_lo = special.log_ndtr(-lo)
    log_sf_hi = special.log_ndtr(-hi)
    log_p = log_sf_lo + np.log1p(u * np.expm1(log_sf_hi - log_sf_lo))
    return -special.ndtri_exp(log_p)


def truncexp_ppf(slope, lo, hi, u):
    """Quantile `u` of the density proportional to ``exp(slope * t)`` on ``(lo, hi)``.

    Either bound may be infinite provided the density decays in that
    direction.  Slopes below 1e-12 in magnitude are treated as uniform.
    """
    g, lo, hi, u = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (slope, lo, hi, u))
    )
    width = hi - lo
    flat = np.abs(g) < 1e-12
    if np.any(flat & ~np.isfinite(width)):
        raise InvalidInput("uniform line law on an unbounded segment")
    if np.any((g > 0) & ~np.isfinite(hi)) or np.any((g < 0) & ~np.isfinite(lo)):
        raise InvalidInput("exponential line law does not decay on an unbounded side")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        gs = np.where(flat, 1.0, g)
        from_lo = lo + np.log1p(u * np.expm1(gs * width)) / gs
        from_hi = hi + np.log1p((1.0 - u) * np.expm1(-gs * width)) / gs
        out = np.where(flat, lo + u * width, np.where(g < 0, from_lo, from_hi))
    out = np.clip(out, lo, hi)
    return out if out.ndim else float(out)


def truncated_interval_gaussian(lo, hi, rng, size=None):
    """Standard normal draw restricted to the finite interval ``[lo, hi]``."""
    lo = float(lo)
    hi = float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise InvalidInput("interval bounds must be finite")
    if not lo < hi:
        raise EmptyInterval(f"empty interval [{lo:g}, {hi:g}]")
    return truncnorm_ppf(lo, hi, rng.uniform(size))


def sample(kind, theta, rng):
    """Independent draws, one per entry of `theta`."""
    kind = ActivationKind.parse(kind)
    t = _check_theta(kind, theta)
    if kind is ActivationKind.LINEAR:
        val = t + rng.normal(t.shape or None)
    else:
        u = rng.uniform(t.shape or None)
        if kind is ActivationKind.TG:
            val = t + truncnorm_ppf(-t, np.inf, u)
        elif kind is ActivationKind.EXP:
            val = truncexp_ppf(t, 0.0, np.inf, u)
        else:
            val = truncexp_ppf(t, 0.0, 1.0, u)
    return _out(np.asarray(val, dtype=np.float64), theta)


def sample_univariate(law, rng):
    return float(sample(law.kind, law.theta, rng))


def relu_limit_mean(a, sigma):
    """TG mean when the prior variance is ``sigma**2``; tends to ``max(a, 0)``."""
    sigma = float(sigma)
    if not sigma > 0:
        raise InvalidInput("sigma must be positive")
    a = np.asarray(a, dtype=np.float64)
    return _out(sigma * np.asarray(mean_lambda(ActivationKind.TG, a / sigma)), a)
