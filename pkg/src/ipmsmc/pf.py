"""Particle filters returning unbiased likelihood estimates.

Both filters are batched: pass ``theta`` of shape ``(B, d)`` to run ``B``
independent filters at once (a 1-d ``theta`` runs one filter and returns a
scalar log-likelihood).  All weight arithmetic stays in log space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ModelSpec, normalize_logweights_rows
from .resampling import multinomial_resample, systematic_resample

RESAMPLING_MODES = ("systematic", "multinomial", "always-multinomial")


@dataclass(frozen=True)
class PfConfig:
    n_particles: int
    ess_threshold: float = 0.9
    resampling: str = "systematic"
    use_proposal: bool = False

    def __post_init__(self):
        if int(self.n_particles) < 1:
            raise ValueError("n_particles must be positive")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in [0, 1]")
        if self.resampling not in RESAMPLING_MODES:
            raise ValueError(f"resampling must be one of {RESAMPLING_MODES}")


@dataclass
class ParticleCloud:
    """Final filtering cloud for a batch of ``B`` filters.

    ``resampled[b, t]`` is the flag for step ``t`` (length ``T - 1``);
    ``ess[b, t]`` the ESS fraction of the weights at ``t``.  ``ancestors``
    is only filled when the filter was asked to keep its history.
    """

    states: np.ndarray
    logw: np.ndarray
    W: np.ndarray
    resampled: np.ndarray
    ess: np.ndarray
    loglik: np.ndarray
    ancestors: list[np.ndarray] = field(default_factory=list)


def _take(states, anc):
    return np.take_along_axis(states, anc[:, :, None], axis=1)


def _ess_rows(W):
    return 1.0 / (W.shape[1] * np.sum(W * W, axis=1))


def _unbatch(theta, loglik):
    return float(loglik[0]) if np.ndim(theta) == 1 else loglik


def run_pf_simple(model: ModelSpec, theta, y, n_particles: int, rng, keep_history=False):
    """Bootstrap filter with multinomial resampling at every step."""
    ssm = model.ssm
    th = model.as_batch(theta)
    B, N, T = th.shape[0], int(n_particles), len(y)
    if N < 1 or T < 1:
        raise ValueError("need at least one particle and one observation")
    states = ssm.initial_sample(th, N, rng)
    logw = ssm.obs_logpdf(th, 0, states, y[0])
    W, logmean = normalize_logweights_rows(logw)
    loglik = logmean
    ess = np.empty((B, T))
    ess[:, 0] = _ess_rows(W)
    history = []
    for t in range(1, T):
        anc = multinomial_resample(W, rng)
        if keep_history:
            history.append(anc)
        states = ssm.transition_sample(th, t, _take(states, anc), rng)
        logw = ssm.obs_logpdf(th, t, states, y[t])
        W, logmean = normalize_logweights_rows(logw)
        loglik = loglik + logmean
        ess[:, t] = _ess_rows(W)
    cloud = ParticleCloud(states, logw, W, np.ones((B, T - 1), bool), ess, loglik, history)
    return _unbatch(theta, loglik), cloud


def run_pf_adaptive(model: ModelSpec, theta, y, cfg: PfConfig, rng, keep_history=False):
    """Filter with ESS-triggered resampling and optional proposal kernels.

    Resampling happens at step ``t`` when the ESS fraction of the carried
    weights drops below ``cfg.ess_threshold`` (always when the threshold is
    1, or in ``always-multinomial`` mode).  The estimate multiplies the mean
    carried weight over resampling steps and the final step.
    """
    ssm = model.ssm
    if cfg.use_proposal and not ssm.has_proposal:
        raise ValueError(f"{model.model_id} does not provide proposal kernels")
    th = model.as_batch(theta)
    B, N, T = th.shape[0], int(cfg.n_particles), len(y)
    if T < 1:
        raise ValueError("empty observation series")
    always = cfg.resampling == "always-multinomial" or cfg.ess_threshold >= 1.0
    use_multinomial = cfg.resampling != "systematic"

    if cfg.use_proposal:
        states = ssm.proposal_sample(th, 0, None, y[0], N, rng)
        logw = (
            ssm.initial_logpdf(th, states)
            + ssm.obs_logpdf(th, 0, states, y[0])
            - ssm.proposal_logpdf(th, 0, None, states, y[0])
        )
    else:
        states = ssm.initial_sample(th, N, rng)
        logw = ssm.obs_logpdf(th, 0, states, y[0])

    loglik = np.zeros(B)
    resampled = np.zeros((B, T - 1), bool)
    ess = np.empty((B, T))
    history = []
    for t in range(1, T):
        W, logmean = normalize_logweights_rows(logw)
        ess[:, t - 1] = _ess_rows(W)
        mask = np.ones(B, bool) if always else ess[:, t - 1] < cfg.ess_threshold
        resampled[:, t - 1] = mask
        if mask.all():
            loglik = loglik + logmean
            anc = multinomial_resample(W, rng) if use_multinomial else systematic_resample(W, rng.random(B))
            states = _take(states, anc)
            logw = np.zeros_like(logw)
        elif mask.any():
            loglik[mask] += logmean[mask]
            rows = np.flatnonzero(mask)
            Wm = W[rows]
            sub = multinomial_resample(Wm, rng) if use_multinomial else systematic_resample(Wm, rng.random(rows.size))
            anc = np.tile(np.arange(N), (B, 1))
            anc[rows] = sub
            states = _take(states, anc)
            logw = logw.copy()
            logw[rows] = 0.0
        else:
            anc = None
        if keep_history:
            history.append(np.tile(np.arange(N), (B, 1)) if anc is None else anc)

        prev = states
        if cfg.use_proposal:
            states = ssm.proposal_sample(th, t, prev, y[t], N, rng)
            logw = logw + (
                ssm.transition_logpdf(th, t, prev, states)
                + ssm.obs_logpdf(th, t, states, y[t])
                - ssm.proposal_logpdf(th, t, prev, states, y[t])
            )
        else:
            states = ssm.transition_sample(th, t, prev, rng)
            logw = logw + ssm.obs_logpdf(th, t, states, y[t])

    W, logmean = normalize_logweights_rows(logw)
    ess[:, T - 1] = _ess_rows(W)
    loglik = loglik + logmean
    loglik = np.where(np.isnan(loglik), -np.inf, loglik)
    cloud = ParticleCloud(states, logw, W, resampled, ess, loglik, history)
    return _unbatch(theta, loglik), cloud


def estimate_loglik(model: ModelSpec, theta, y, cfg: PfConfig, rng):
    """Log-likelihood estimates only; dispatches on the resampling mode."""
    if cfg.resampling == "always-multinomial" and not cfg.use_proposal:
        return run_pf_simple(model, theta, y, cfg.n_particles, rng)[0]
    return run_pf_adaptive(model, theta, y, cfg, rng)[0]
