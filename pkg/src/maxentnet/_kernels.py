"""Compiled hit-and-run sweeps.

Same arithmetic as ``manifold._sweep`` written as scalar loops for numba.
The normal-distribution functions are scipy's own C implementations reached
through ``scipy.special.cython_special``.
"""
import ctypes
import math

import numba
import numpy as np
from numba.extending import get_cython_function_address

_D_D = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double)


def _special(name):
    return _D_D(get_cython_function_address("scipy.special.cython_special", name))


# fused index 1 is the real-double specialization
_ndtr = _special("__pyx_fuse_1ndtr")
_log_ndtr = _special("__pyx_fuse_1log_ndtr")
_ndtri = _special("ndtri")
_ndtri_exp = _special("ndtri_exp")


@numba.njit
def _upper_tail_ppf(lo, hi, u):
    log_sf_lo = _log_ndtr(-lo)
    log_sf_hi = _log_ndtr(-hi)
    return -_ndtri_exp(log_sf_lo + math.log1p(u * math.expm1(log_sf_hi - log_sf_lo)))


@numba.njit
def truncnorm_ppf(lo, hi, u):
    if lo >= 0.0:
        s = _upper_tail_ppf(lo, hi, u)
    elif hi <= 0.0:
        s = -_upper_tail_ppf(-hi, -lo, 1.0 - u)
    else:
        p_lo = _ndtr(lo)
        p_hi = _ndtr(hi)
        s = _ndtri(p_lo + u * (p_hi - p_lo))
    return min(max(s, lo), hi)


@numba.njit
def truncexp_ppf(g, lo, hi, u):
    width = hi - lo
    if abs(g) < 1e-12:
        t = lo + u * width
    elif g < 0.0:
        t = lo + math.log1p(u * math.expm1(g * width)) / g
    else:
        t = hi + math.log1p((1.0 - u) * math.expm1(-g * width)) / g
    return min(max(t, lo), hi)


@numba.njit
def sweeps(X, B, theta0, quad, lo, hi, U, trace):
    """Advance every chain ``U.shape[0]`` sweeps, writing each state to `trace`.

    X (C, N) is updated in place; U has shape (n_sweeps, C, K).
    """
    n_sweeps, C, K = U.shape
    N = X.shape[1]
    xn = np.empty(N)
    for i in range(n_sweeps):
        for c in range(C):
            for j in range(K):
                t_lo = -np.inf
                t_hi = np.inf
                bn2 = 0.0
                tb = 0.0
                xb = 0.0
                for n in range(N):
                    d = B[c, n, j]
                    x = X[c, n]
                    bn2 += d * d
                    tb += theta0[c, n] * d
                    xb += x * d
                    if d > 0.0:
                        if lo > -np.inf:
                            t_lo = max(t_lo, (lo - x) / d)
                        if hi < np.inf:
                            t_hi = min(t_hi, (hi - x) / d)
                    elif d < 0.0:
                        if lo > -np.inf:
                            t_hi = min(t_hi, (lo - x) / d)
                        if hi < np.inf:
                            t_lo = max(t_lo, (hi - x) / d)
                u = U[i, c, j]
                if quad == 0.0:
                    t = truncexp_ppf(tb, t_lo, t_hi, u)
                else:
                    sd = 1.0 / math.sqrt(bn2)
                    mean = (tb - xb) / bn2
                    s = truncnorm_ppf((t_lo - mean) / sd, (t_hi - mean) / sd, u)
                    t = min(max(mean + sd * s, t_lo), t_hi)
                ok = True
                for n in range(N):
                    xn[n] = X[c, n] + t * B[c, n, j]
                    if not (xn[n] > lo and xn[n] < hi):
                        ok = False
                if ok:
                    for n in range(N):
                        X[c, n] = xn[n]
            for n in range(N):
                trace[i, c, n] = X[c, n]
