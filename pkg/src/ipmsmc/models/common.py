"""Shared pieces of the ecological models: links, pmfs, m-arrays, covariates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, expit, gammaln, xlogy


def log_expit(x):
    return -np.logaddexp(0.0, -x)


def log1m_expit(x):
    return -np.logaddexp(0.0, x)


def poisson_logpmf(k, lam):
    """Poisson log-mass, ``-inf`` for ``k > 0`` at rate zero."""
    k = np.asarray(k, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return xlogy(k, lam) - lam - gammaln(k + 1.0)


def negbin_logpmf(k, size, prob=None, logit_prob=None):
    """Negative-binomial log-mass with mean ``size * (1 - prob) / prob``.

    ``size == 0`` is the point mass at zero.  Passing ``logit_prob`` instead
    of ``prob`` keeps precision when ``prob`` is close to one.
    """
    k = np.asarray(k, dtype=float)
    size = np.asarray(size, dtype=float)
    if logit_prob is not None:
        x = np.asarray(logit_prob, dtype=float)
        log_p, log_q = log_expit(x), log1m_expit(x)
    else:
        prob = np.asarray(prob, dtype=float)
        with np.errstate(divide="ignore"):
            log_p, log_q = np.log(prob), np.log1p(-prob)
    safe = np.where(size > 0, size, 1.0)
    kk = np.where(k > 0, k, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        # log C(k + size - 1, k) via betaln: stable when size >> k
        log_coef = np.where(k > 0, -np.log(kk) - betaln(kk, safe), 0.0)
        out = log_coef + safe * log_p + np.where(k > 0, k * log_q, 0.0)
    return np.where(size > 0, out, np.where(k == 0, 0.0, -np.inf))


def multinomial_logpmf(counts, probs):
    """Row-wise multinomial log-mass; ``counts`` ``(..., K)`` against ``probs`` ``(..., K)``."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum(axis=-1)
    with np.errstate(divide="ignore"):
        terms = xlogy(counts, probs)
    return gammaln(n + 1.0) - np.sum(gammaln(counts + 1.0), axis=-1) + np.sum(terms, axis=-1)


def zscore(x):
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    if sd == 0:
        return x - x.mean(), float(x.mean()), 1.0
    return (x - x.mean()) / sd, float(x.mean()), float(sd)


@dataclass(frozen=True)
class MArray:
    """Release/recapture (or recovery) summary.

    Row ``i`` holds the animals released at occasion ``release_times[i]``
    (0-based); column ``j < n_occasions`` counts first re-encounters at
    ``occasions[j]``; the final column counts animals never seen again.
    Cells at or before the release occasion must be zero.
    """

    release_times: np.ndarray
    occasions: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        rel = np.asarray(self.release_times, dtype=np.int64)
        occ = np.asarray(self.occasions, dtype=np.int64)
        m = np.asarray(self.counts)
        if m.shape != (rel.size, occ.size + 1):
            raise ValueError(f"m-array shape {m.shape} does not match {rel.size} releases x {occ.size + 1} cells")
        if np.any(m < 0) or np.any(m != np.round(m)):
            raise ValueError("m-array entries must be non-negative integers")
        bad = (occ[None, :] <= rel[:, None]) & (m[:, :-1] != 0)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"m-array cell (release {rel[i]}, occasion {occ[j]}) must be zero")
        object.__setattr__(self, "release_times", rel)
        object.__setattr__(self, "occasions", occ)
        object.__setattr__(self, "counts", m.astype(np.int64))

    @property
    def releases(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def check_releases(self, R) -> None:
        R = np.asarray(R)
        if R.shape != self.releases.shape or np.any(R != self.releases):
            raise ValueError("m-array row sums do not equal the release counts")


@dataclass(frozen=True)
class CovariateTable:
    """Yearly covariates with z-scored columns (sample SD) over the study years."""

    years: np.ndarray
    voles: np.ndarray
    frost_days: np.ndarray

    def __post_init__(self):
        years = np.asarray(self.years, dtype=np.int64)
        voles = np.asarray(self.voles, dtype=float)
        frost = np.asarray(self.frost_days, dtype=float)
        if not (years.shape == voles.shape == frost.shape) or years.ndim != 1:
            raise ValueError("covariate columns differ in length")
        if np.any((voles != 0) & (voles != 1)):
            raise ValueError("voles indicator must be 0 or 1")
        if np.any(~np.isfinite(frost)):
            raise ValueError("frost days must be finite")
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "voles", voles)
        object.__setattr__(self, "frost_days", frost)

    @property
    def year_norm(self) -> np.ndarray:
        return zscore(self.years)[0]

    @property
    def time_norm(self) -> np.ndarray:
        return self.year_norm

    @property
    def frost_norm(self) -> np.ndarray:
        return zscore(self.frost_days)[0]

    def normalisation(self) -> dict:
        _, ym, ys = zscore(self.years)
        _, fm, fs = zscore(self.frost_days)
        return {"year": {"mean": ym, "sd": ys}, "frost_days": {"mean": fm, "sd": fs}}

    def __len__(self):
        return self.years.size


def split_params(theta, names, pinned=None):
    """Map a ``(B, d)`` batch to ``{name: (B,) array}``, filling pinned zeros."""
    theta = np.atleast_2d(theta)
    out = {n: theta[:, i] for i, n in enumerate(names)}
    for n in pinned or ():
        out[n] = np.zeros(theta.shape[0])
    return out


__all__ = [
    "expit", "log_expit", "log1m_expit", "poisson_logpmf", "negbin_logpmf",
    "multinomial_logpmf", "zscore", "MArray", "CovariateTable", "split_params",
]
