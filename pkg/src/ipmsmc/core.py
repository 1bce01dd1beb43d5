"""Domain types shared by the filters and samplers.

Everything that touches a model goes through :class:`ModelSpec`, a bundle
of plain callables.  All callables are *batched over parameters*: ``theta``
is a ``(B, d)`` array and every density returns a ``(B,)`` (or ``(B, N)``
for per-particle quantities) array.  This lets the particle filter run many
independent filters in one set of numpy operations, which is what makes
particle MCMC and the SMC samplers affordable in pure Python.

Latent states of a particle cloud are held as a single array of shape
``(B, N, state_dim)``.  The eco-models use integer arrays (counts, with a
trailing regime column for regime-switching herons); the test models use
whatever dtype suits them.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np


class DegenerateWeights(ValueError):
    """All importance weights are zero."""


class NumericalAbort(RuntimeError):
    """A sampler cannot continue; ``diagnostics`` describes the state."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# log-space numerics
# ---------------------------------------------------------------------------


def log_sum_exp(xs, axis=None):
    """Stable ``log(sum(exp(xs)))``; ``-inf`` when every term is ``-inf``."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = np.max(xs, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(xs - m_safe), axis=axis, keepdims=True)) + m_safe
    out = np.where(np.isneginf(m), -np.inf, out)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_mean_exp(xs, axis=None):
    xs = np.asarray(xs, dtype=float)
    n = xs.size if axis is None else xs.shape[axis]
    return log_sum_exp(xs, axis=axis) - np.log(n)


def normalize_logweights(logw):
    """Return ``(W, logmean)`` for a vector of log-weights.

    ``W`` are the normalised weights and ``logmean`` is
    ``log(mean(exp(logw)))``, i.e. the normalising-constant increment.
    """
    logw = np.asarray(logw, dtype=float)
    if logw.size == 0:
        raise ValueError("empty weight vector")
    lse = log_sum_exp(logw)
    if not np.isfinite(lse):
        raise DegenerateWeights("all weights are zero")
    W = np.exp(logw - lse)
    W /= W.sum()
    return W, lse - np.log(logw.size)


def normalize_logweights_rows(logw):
    """Row-wise :func:`normalize_logweights` for a ``(B, N)`` array.

    Rows whose weights are all zero get uniform ``W`` and ``logmean=-inf``
    instead of raising; callers decide what a dead row means.
    """
    logw = np.asarray(logw, dtype=float)
    lse = log_sum_exp(logw, axis=1)
    dead = ~np.isfinite(lse)
    shift = np.where(dead, 0.0, lse)[:, None]
    with np.errstate(invalid="ignore"):
        W = np.exp(logw - shift)
    W[dead] = 1.0
    W /= W.sum(axis=1, keepdims=True)
    return W, lse - np.log(logw.shape[1])


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Named, finite parameter vector."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(names) == 0:
            raise ValueError("a parameter vector needs at least one entry")
        if len(names) != values.size:
            raise ValueError(f"{len(names)} names for {values.size} values")
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.names, self.values.tobytes()))

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    @classmethod
    def from_dict(cls, d: dict[str, float], names: Sequence[str] | None = None):
        names = tuple(names) if names is not None else tuple(d)
        return cls(names, np.array([d[n] for n in names], dtype=float))


class LatentState(NamedTuple):
    """One particle's latent state: class counts plus optional regime."""

    counts: tuple[int, ...]
    regime: int | None = None

    @classmethod
    def from_row(cls, row, has_regime: bool) -> LatentState:
        row = [int(v) for v in row]
        if has_regime:
            return cls(tuple(row[:-1]), row[-1])
        return cls(tuple(row))


@dataclass(frozen=True)
class CountSeries:
    """Observed counts ``y_1..y_T`` (stored 0-based)."""

    values: np.ndarray
    years: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("count series must be a non-empty 1-d sequence")
        if np.any(v < 0) or np.any(v != np.round(v)):
            raise ValueError("counts must be non-negative integers")
        object.__setattr__(self, "values", v.astype(np.int64))
        if self.years is not None:
            yrs = np.asarray(self.years, dtype=np.int64)
            if yrs.shape != v.shape:
                raise ValueError("years and counts differ in length")
            object.__setattr__(self, "years", yrs)

    def __len__(self):
        return self.values.size

    @property
    def T(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class StateSpaceModel:
    """Batched SSM callables.

    ``t`` is the 0-based time index.  ``transition_sample(theta, t, prev,
    rng)`` draws ``x_t`` given ``x_{t-1}`` for ``t >= 1``.  The optional
    proposal hooks (with matching ``initial_logpdf``/``transition_logpdf``)
    are only used when a filter is run with ``use_proposal=True``;
    ``proposal_sample(theta, t, prev, y_t, n, rng)`` receives ``prev=None``
    at ``t=0``.
    """

    initial_sample: Callable[..., np.ndarray]
    transition_sample: Callable[..., np.ndarray]
    obs_logpdf: Callable[..., np.ndarray]
    initial_logpdf: Callable[..., np.ndarray] | None = None
    transition_logpdf: Callable[..., np.ndarray] | None = None
    proposal_sample: Callable[..., np.ndarray] | None = None
    proposal_logpdf: Callable[..., np.ndarray] | None = None

    @property
    def has_proposal(self) -> bool:
        return None not in (
            self.proposal_sample,
            self.proposal_logpdf,
            self.initial_logpdf,
            self.transition_logpdf,
        )


def _zero_loglik(theta):
    return np.zeros(np.atleast_2d(theta).shape[0])


@dataclass(frozen=True)
class ModelSpec:
    """One model ``M_i``: prior, additional-data likelihood and count SSM.

    ``prior_logpdf`` and ``additional_loglik`` map ``(B, d)`` to ``(B,)``
    and must return ``-inf`` (never NaN) outside their support.
    ``prior_sample(rng, size)`` returns a ``(size, d)`` array.
    ``prior_mean``/``prior_var`` declare the prior moments when known.
    """

    model_id: str
    param_names: tuple[str, ...]
    prior_logpdf: Callable[[np.ndarray], np.ndarray]
    prior_sample: Callable[[np.random.Generator, int], np.ndarray]
    ssm: StateSpaceModel
    additional_loglik: Callable[[np.ndarray], np.ndarray] = _zero_loglik
    prior_mean: np.ndarray | None = None
    prior_var: np.ndarray | None = None
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.param_names)

    def template(self, values=None) -> ParamVector:
        if values is None:
            values = np.zeros(self.dim) if self.prior_mean is None else self.prior_mean
        return ParamVector(self.param_names, values)

    def as_batch(self, theta) -> np.ndarray:
        if isinstance(theta, ParamVector):
            theta = theta.values
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != self.dim:
            raise ValueError(f"{self.model_id}: expected {self.dim} parameters, got {theta.shape[1]}")
        return theta


def joint_loglik(model: ModelSpec, theta, loghat_count):
    """``log p(y|theta)`` estimate plus ``log p(m|theta)``."""
    scalar = np.ndim(loghat_count) == 0 and np.ndim(getattr(theta, "values", theta)) <= 1
    add = model.additional_loglik(model.as_batch(theta))
    out = np.asarray(loghat_count, dtype=float) + add
    return float(out[0]) if scalar else out


def gaussian_prior(names, mean, var):
    """Independent Gaussian prior callables ``(logpdf, sample)``; ``var`` is a variance."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    sd = np.sqrt(var)
    const = -0.5 * np.sum(np.log(2 * np.pi * var))

    def logpdf(theta):
        theta = np.atleast_2d(theta)
        with np.errstate(invalid="ignore"):
            out = const - 0.5 * np.sum((theta - mean) ** 2 / var, axis=1)
        return np.where(np.isnan(out), -np.inf, out)

    def sample(rng, size):
        return mean + sd * rng.standard_normal((size, mean.size))

    return logpdf, sample
