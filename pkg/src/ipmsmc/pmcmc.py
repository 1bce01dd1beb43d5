"""Particle marginal Metropolis-Hastings and its delayed-acceptance variant.

The move kernels work on a whole batch of chains at once (the SMC samplers
move all their particles together); :func:`pmcmc_update`,
:func:`da_pmcmc_update` and :func:`run_chain` are the single-chain
interface on top of them.

Likelihood exponents are split into ``alpha_count`` (on the count-data
estimate) and ``alpha_add`` (on the additional data) so the two-stage SMC
sampler can keep the additional data at full weight.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import ModelSpec, ParamVector
from .pf import PfConfig, estimate_loglik

log = logging.getLogger(__name__)

MIXTURE_WEIGHTS = (0.95, 0.05)
RW_SCALE = 2.38
SMALL_SCALE = 0.1


@dataclass(frozen=True)
class ProposalConfig:
    """Two-component Gaussian random-walk mixture.

    Main component covariance ``2.38^2 / d * lam * sigma``; the small
    component has covariance ``small_scale^2 / d * I``.
    """

    sigma: np.ndarray
    lam: float = 1.0
    weights: tuple[float, float] = MIXTURE_WEIGHTS
    small_scale: float = SMALL_SCALE
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape[0] != sigma.shape[1]:
            raise ValueError("proposal covariance must be square")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("proposal covariance must be symmetric")
        if not self.lam > 0:
            raise ValueError("proposal scale lambda must be positive")
        object.__setattr__(self, "sigma", sigma)
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            log.warning("proposal covariance not positive definite; using its diagonal")
            chol = np.diag(np.sqrt(np.clip(np.diag(sigma), 0.0, None)))
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def main_chol(self) -> np.ndarray:
        return RW_SCALE * np.sqrt(self.lam / self.dim) * self._chol

    @property
    def small_sd(self) -> float:
        return self.small_scale / np.sqrt(self.dim)

    def with_lambda(self, lam: float) -> ProposalConfig:
        return ProposalConfig(self.sigma, lam, self.weights, self.small_scale)


def mixture_propose(theta, cfg: ProposalConfig, rng):
    """Random-walk mixture proposal; ``theta`` may be ``(d,)`` or ``(B, d)``."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    B, d = th.shape
    if d != cfg.dim:
        raise ValueError("proposal dimension does not match theta")
    small = rng.random(B) >= cfg.weights[0]
    z = rng.standard_normal((B, d))
    step = z @ cfg.main_chol.T
    step[small] = z[small] * cfg.small_sd
    out = th + step
    return out[0] if np.ndim(theta) == 1 else out


def mixture_logpdf(theta_new, theta, cfg: ProposalConfig):
    """``log q(theta_new | theta)``; symmetric in its two arguments."""
    diff = np.atleast_2d(np.asarray(theta_new, float) - np.asarray(theta, float))
    d = cfg.dim
    L = cfg.main_chol
    z = np.linalg.solve(L, diff.T).T
    main = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(np.diag(L))) - 0.5 * d * np.log(2 * np.pi)
    s = cfg.small_sd
    small = -0.5 * np.sum(diff * diff, axis=1) / s**2 - d * np.log(s) - 0.5 * d * np.log(2 * np.pi)
    with np.errstate(divide="ignore"):
        out = np.logaddexp(np.log(cfg.weights[0]) + main, np.log(cfg.weights[1]) + small)
    return float(out[0]) if np.ndim(theta_new) == 1 else out


def _tempered(alpha, delta):
    """``alpha * delta`` with the convention that a zero exponent ignores the term."""
    if alpha == 0:
        return np.zeros_like(delta)
    with np.errstate(invalid="ignore"):
        out = alpha * delta
    return out


def _accept(log_r, rng):
    u = rng.random(log_r.shape)
    with np.errstate(divide="ignore"):
        return np.log(u) < np.where(np.isnan(log_r), -np.inf, log_r)


@dataclass
class MoveBatch:
    """State of a batch of chains (one row per chain)."""

    theta: np.ndarray
    loghat: np.ndarray
    logadd: np.ndarray
    logprior: np.ndarray

    def take(self, idx) -> MoveBatch:
        return MoveBatch(self.theta[idx], self.loghat[idx], self.logadd[idx], self.logprior[idx])

    def replace(self, mask, other: MoveBatch) -> MoveBatch:
        m = np.asarray(mask, bool)
        return MoveBatch(
            np.where(m[:, None], other.theta, self.theta),
            np.where(m, other.loghat, self.loghat),
            np.where(m, other.logadd, self.logadd),
            np.where(m, other.logprior, self.logprior),
        )


def pmcmc_move(model, y, state: MoveBatch, alpha_count, alpha_add, prop, pfcfg, rng, log_q_ratio=None):
    """One particle-MCMC update for every chain in the batch.

    Returns ``(new_state, accepted, pf_calls)``.  The count-likelihood
    estimate of the current state is never refreshed except on acceptance.
    """
    theta_p = mixture_propose(state.theta, prop, rng)
    logprior_p = model.prior_logpdf(theta_p)
    logadd_p = model.additional_loglik(theta_p)
    loghat_p = np.atleast_1d(estimate_loglik(model, theta_p, y, pfcfg, rng))
    dq = 0.0 if log_q_ratio is None else log_q_ratio(state.theta, theta_p)
    log_r = (
        dq
        + (logprior_p - state.logprior)
        + _tempered(alpha_count, loghat_p - state.loghat)
        + _tempered(alpha_add, logadd_p - state.logadd)
    )
    acc = _accept(log_r, rng)
    new = state.replace(acc, MoveBatch(theta_p, loghat_p, logadd_p, logprior_p))
    return new, acc, theta_p.shape[0]


def da_pmcmc_move(model, y, state: MoveBatch, alpha_count, alpha_add, prop, pfcfg, rng, log_q_ratio=None):
    """Delayed-acceptance update: screen on prior and additional data, then run the PF.

    Returns ``(new_state, stage1_pass, accepted, pf_calls)``; the filter runs
    only for proposals that pass the first stage.
    """
    theta_p = mixture_propose(state.theta, prop, rng)
    logprior_p = model.prior_logpdf(theta_p)
    logadd_p = model.additional_loglik(theta_p)
    dq = 0.0 if log_q_ratio is None else log_q_ratio(state.theta, theta_p)
    log_r1 = dq + (logprior_p - state.logprior) + _tempered(alpha_add, logadd_p - state.logadd)
    stage1 = _accept(log_r1, rng)
    acc = np.zeros_like(stage1)
    loghat_p = np.full(stage1.shape, -np.inf)
    rows = np.flatnonzero(stage1)
    if rows.size:
        loghat_p[rows] = np.atleast_1d(estimate_loglik(model, theta_p[rows], y, pfcfg, rng))
        log_r2 = _tempered(alpha_count, loghat_p[rows] - state.loghat[rows])
        acc[rows] = _accept(log_r2, rng)
    new = state.replace(acc, MoveBatch(theta_p, loghat_p, logadd_p, logprior_p))
    return new, stage1, acc, int(rows.size)


def mh_move(model, state: MoveBatch, alpha_add, prop, rng):
    """Plain MH on ``prior * p(m|theta)^alpha_add``; no particle filter."""
    theta_p = mixture_propose(state.theta, prop, rng)
    logprior_p = model.prior_logpdf(theta_p)
    logadd_p = model.additional_loglik(theta_p)
    log_r = (logprior_p - state.logprior) + _tempered(alpha_add, logadd_p - state.logadd)
    acc = _accept(log_r, rng)
    new = state.replace(acc, MoveBatch(theta_p, state.loghat, logadd_p, logprior_p))
    return new, acc


# ---------------------------------------------------------------------------
# single chains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainState:
    theta: np.ndarray
    loghat_count: float
    logadd: float
    logprior: float

    def batch(self) -> MoveBatch:
        return MoveBatch(
            np.asarray(self.theta, float)[None, :],
            np.array([self.loghat_count]),
            np.array([self.logadd]),
            np.array([self.logprior]),
        )

    @classmethod
    def from_batch(cls, b: MoveBatch) -> ChainState:
        return cls(b.theta[0].copy(), float(b.loghat[0]), float(b.logadd[0]), float(b.logprior[0]))


def initial_state(model: ModelSpec, y, pfcfg: PfConfig, rng, init=None, retries=100) -> ChainState:
    """Evaluate ``init`` (or a prior draw, retried until both likelihoods are finite)."""
    for _ in range(retries if init is None else 1):
        theta = model.prior_sample(rng, 1)[0] if init is None else model.as_batch(init)[0]
        loghat = float(estimate_loglik(model, theta, y, pfcfg, rng))
        logadd = float(model.additional_loglik(theta[None, :])[0])
        if np.isfinite(loghat) and np.isfinite(logadd):
            return ChainState(theta, loghat, logadd, float(model.prior_logpdf(theta[None, :])[0]))
    raise RuntimeError(f"{model.model_id}: no starting point with finite likelihood")


def pmcmc_update(state: ChainState, model, y, alpha, cfg: ProposalConfig, pfcfg: PfConfig, rng):
    new, acc, _ = pmcmc_move(model, y, state.batch(), alpha, alpha, cfg, pfcfg, rng)
    return ChainState.from_batch(new), bool(acc[0])


def da_pmcmc_update(state: ChainState, model, y, alpha, cfg: ProposalConfig, pfcfg: PfConfig, rng, alpha_add=None):
    alpha_add = alpha if alpha_add is None else alpha_add
    new, s1, acc, _ = da_pmcmc_move(model, y, state.batch(), alpha, alpha_add, cfg, pfcfg, rng)
    return ChainState.from_batch(new), bool(s1[0]), bool(acc[0])


@dataclass
class ChainRecord:
    param_names: tuple[str, ...]
    theta: np.ndarray
    log_count_lik: np.ndarray
    log_add_lik: np.ndarray
    accepted: np.ndarray
    stage1_pass: np.ndarray
    pf_calls_cum: np.ndarray
    seconds_cum: np.ndarray
    delayed_acceptance: bool

    @property
    def n_iters(self) -> int:
        return self.theta.shape[0]

    def summary(self) -> dict:
        return {
            "n_iters": self.n_iters,
            "delayed_acceptance": self.delayed_acceptance,
            "acceptance_rate": float(self.accepted.mean()),
            "stage1_pass_rate": float(self.stage1_pass.mean()),
            "pf_calls": int(self.pf_calls_cum[-1]),
            "seconds": float(self.seconds_cum[-1]),
            "posterior_mean": dict(zip(self.param_names, map(float, self.theta.mean(axis=0)))),
            "posterior_sd": dict(zip(self.param_names, map(float, self.theta.std(axis=0)))),
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(self.n_iters):
                fh.write(json.dumps({
                    "iter": i + 1,
                    "theta": [float(v) for v in self.theta[i]],
                    "log_count_lik": float(self.log_count_lik[i]),
                    "log_add_lik": float(self.log_add_lik[i]),
                    "accepted": bool(self.accepted[i]),
                    "stage1_pass": bool(self.stage1_pass[i]),
                    "pf_calls_cum": int(self.pf_calls_cum[i]),
                    "seconds_cum": float(self.seconds_cum[i]),
                }) + "\n")

    @classmethod
    def read_jsonl(cls, path, param_names=None, delayed_acceptance=False) -> ChainRecord:
        rows = [json.loads(line) for line in open(path) if line.strip()]
        theta = np.array([r["theta"] for r in rows])
        names = tuple(param_names) if param_names else tuple(f"theta{i}" for i in range(theta.shape[1]))
        return cls(
            names, theta,
            np.array([r["log_count_lik"] for r in rows]), np.array([r["log_add_lik"] for r in rows]),
            np.array([r["accepted"] for r in rows]), np.array([r["stage1_pass"] for r in rows]),
            np.array([r["pf_calls_cum"] for r in rows]), np.array([r["seconds_cum"] for r in rows]),
            delayed_acceptance,
        )


def run_chain(model: ModelSpec, y, n_iters: int, init, alpha, cfg: ProposalConfig, pfcfg: PfConfig,
              da: bool, rng) -> ChainRecord:
    """Run ``n_iters`` PMCMC (``da=False``) or DA-PMCMC updates.

    ``init`` is a :class:`ChainState`, a parameter vector, or ``None`` for a
    prior draw.  The PF call counter excludes the initial evaluation.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    state = init if isinstance(init, ChainState) else initial_state(model, y, pfcfg, rng, init)
    d = model.dim
    theta = np.empty((n_iters, d))
    lc, la = np.empty(n_iters), np.empty(n_iters)
    acc, s1 = np.zeros(n_iters, bool), np.zeros(n_iters, bool)
    calls, secs = np.zeros(n_iters, np.int64), np.zeros(n_iters)
    batch = state.batch()
    n_calls = 0
    t0 = time.perf_counter()
    for i in range(n_iters):
        if da:
            batch, st1, a, c = da_pmcmc_move(model, y, batch, alpha, alpha, cfg, pfcfg, rng)
            s1[i] = st1[0]
        else:
            batch, a, c = pmcmc_move(model, y, batch, alpha, alpha, cfg, pfcfg, rng)
            s1[i] = True
        n_calls += c
        acc[i] = a[0]
        theta[i] = batch.theta[0]
        lc[i], la[i] = batch.loghat[0], batch.logadd[0]
        calls[i] = n_calls
        secs[i] = time.perf_counter() - t0
    return ChainRecord(tuple(model.param_names), theta, lc, la, acc, s1, calls, secs, da)


__all__ = [
    "ProposalConfig", "mixture_propose", "mixture_logpdf", "MoveBatch", "pmcmc_move", "da_pmcmc_move",
    "mh_move", "ChainState", "initial_state", "pmcmc_update", "da_pmcmc_update", "ChainRecord", "run_chain",
    "ParamVector",
]
