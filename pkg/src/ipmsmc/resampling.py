"""Resampling schemes, ESS and conditional ESS.

Both ESS and CESS are reported as fractions of the particle count, so
thresholds such as 0.9 or 0.9999 apply directly.  Ancestor indices are
0-based and returned sorted.
"""

from __future__ import annotations

import numpy as np

from .core import log_sum_exp

_NORM_TOL = 1e-8


def _check_normalised(W, axis=-1):
    s = np.sum(W, axis=axis)
    if np.any(np.abs(s - 1.0) > _NORM_TOL) or np.any(W < 0):
        raise ValueError("weights must be non-negative and sum to one")


def ess_fraction(W):
    """``1 / (N * sum W_i^2)``; works row-wise on a ``(B, N)`` array."""
    W = np.asarray(W, dtype=float)
    _check_normalised(W)
    out = 1.0 / (W.shape[-1] * np.sum(W * W, axis=-1))
    return float(out) if W.ndim == 1 else out


def cess_fraction_log(W, log_u, delta):
    """Conditional ESS fraction with incremental weights ``exp(delta * log_u)``."""
    W = np.asarray(W, dtype=float)
    log_u = np.asarray(log_u, dtype=float)
    live = W > 0
    if not np.any(live & np.isfinite(log_u)) and delta > 0:
        raise ValueError("all incremental weights are zero")
    if delta == 0:
        return 1.0
    logW = np.log(W[live])
    x = delta * log_u[live]
    num = 2.0 * log_sum_exp(logW + x)
    den = log_sum_exp(logW + 2.0 * x)
    return float(min(1.0, np.exp(num - den)))


def cess_fraction(W, u, delta):
    """``[sum W u^delta]^2 / sum W u^(2 delta)`` for positive ``u``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("incremental weights must be non-negative")
    _check_normalised(np.asarray(W, dtype=float))
    with np.errstate(divide="ignore"):
        return cess_fraction_log(W, np.log(u), delta)


def solve_temperature(W, log_u, prev, cess_star, cap=1.0, tol=1e-10):
    """Next temperature: the largest step keeping CESS at ``cess_star``.

    Bisects on the increment in ``[0, cap - prev]``.  If even the full step
    keeps CESS at or above target, ``cap`` is returned.  The returned step is
    the upper end of the final bracket so progress is always positive.
    """
    if not 0.0 < cess_star < 1.0:
        raise ValueError("cess_star must lie in (0, 1)")
    if not 0.0 <= prev < cap <= 1.0:
        raise ValueError("need 0 <= prev < cap <= 1")
    width = cap - prev
    if cess_fraction_log(W, log_u, width) >= cess_star:
        return cap
    lo, hi = 0.0, width
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cess_fraction_log(W, log_u, mid) >= cess_star:
            lo = mid
        else:
            hi = mid
    return min(cap, prev + hi)


def _repeat_counts(counts):
    B, N = counts.shape
    idx = np.repeat(np.tile(np.arange(N), B), counts.ravel())
    return idx.reshape(B, N)


def systematic_resample(W, u0):
    """Systematic resampling with offset ``u0`` in ``[0, 1)``.

    Point ``(u0 + k)/N`` selects the first index whose cumulative weight
    exceeds it.  Accepts a single weight vector or a ``(B, N)`` batch with
    ``u0`` of shape ``(B,)``.
    """
    W = np.asarray(W, dtype=float)
    single = W.ndim == 1
    W2 = np.atleast_2d(W)
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    N = W2.shape[1]
    cum = np.cumsum(W2, axis=1)
    cum[:, -1] = 1.0
    # number of points strictly below each cumulative boundary
    below = np.clip(np.ceil(N * cum - u0[:, None]), 0, N).astype(np.int64)
    below = np.maximum.accumulate(below, axis=1)
    counts = np.diff(below, axis=1, prepend=0)
    anc = _repeat_counts(counts)
    return anc[0] if single else anc


def multinomial_resample(W, rng):
    """I.i.d. categorical draws, returned sorted; batched like the systematic scheme."""
    W = np.asarray(W, dtype=float)
    single = W.ndim == 1
    W2 = np.atleast_2d(W)
    N = W2.shape[1]
    W2 = W2 / W2.sum(axis=1, keepdims=True)
    counts = rng.multinomial(N, W2)
    anc = _repeat_counts(counts)
    return anc[0] if single else anc
