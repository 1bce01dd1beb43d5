"""SMC samplers for model evidence: single-stage and two-stage likelihood tempering.

Both samplers carry unnormalised log-weights between resampling events and
add ``log(mean(v))`` to the evidence at every step that resamples and at the
last step.  Particle moves use the random-walk mixture from :mod:`pmcmc`,
with the covariance taken from the weighted particle cloud and the scale
``lambda`` doubled or halved on the previous step's acceptance rate.
"""

from __future__ import annotations

import csv
import json
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import ModelSpec, NumericalAbort, log_sum_exp, normalize_logweights_rows
from .pf import PfConfig, estimate_loglik
from .pmcmc import MoveBatch, ProposalConfig, da_pmcmc_move, mh_move, pmcmc_move
from .resampling import ess_fraction, solve_temperature, systematic_resample

RIDGE = 1e-9
LAMBDA_RAISE, LAMBDA_DROP = 0.5, 0.2


@dataclass(frozen=True)
class SamplerConfig:
    n_outer: int = 1000
    n_inner: int = 1000
    ess_star: float = 0.9
    cess_star_alpha: float = 0.99
    cess_star_beta: float = 0.99
    lambda0: float = 1.0
    mcmc_moves_per_step: int = 1
    pf_ess_threshold: float = 0.9
    pf_resampling: str = "systematic"
    max_steps: int = 100_000

    def __post_init__(self):
        if self.n_outer < 2 or self.n_inner < 1:
            raise ValueError("need n_outer >= 2 and n_inner >= 1")
        for name in ("ess_star", "cess_star_alpha", "cess_star_beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")
        if self.mcmc_moves_per_step < 1:
            raise ValueError("mcmc_moves_per_step must be >= 1")

    @property
    def pf(self) -> PfConfig:
        return PfConfig(self.n_inner, self.pf_ess_threshold, self.pf_resampling)


@dataclass
class TemperSchedule:
    """Realised tempering path.

    ``stage[s]`` is 0 for single-stage runs and 1 or 2 for the two stages of
    the two-stage sampler; ``temperatures[s]`` is the exponent reached.
    """

    stage: list[int] = field(default_factory=list)
    temperatures: list[float] = field(default_factory=list)
    log_increments: list[float] = field(default_factory=list)
    resampled: list[bool] = field(default_factory=list)
    ess: list[float] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.temperatures)

    @property
    def stage_boundary(self) -> int:
        """Number of stage-1 steps (0 for single-stage runs)."""
        return sum(1 for s in self.stage if s == 1)

    def stage_temperatures(self, stage: int) -> list[float]:
        return [t for s, t in zip(self.stage, self.temperatures) if s == stage]

    def is_valid(self) -> bool:
        for st in set(self.stage):
            temps = [0.0] + self.stage_temperatures(st)
            if temps[-1] != 1.0 or np.any(np.diff(temps) <= 0):
                return False
        return bool(np.all(np.isfinite(self.log_increments)))


@dataclass
class EvidenceEstimate:
    model_id: str
    param_names: tuple[str, ...]
    log_evidence: float
    schedule: TemperSchedule
    particles: np.ndarray
    weights: np.ndarray
    acceptance: list[float]
    lambdas: list[float]
    stage1_pass: list[float]
    pf_calls: int
    seconds: float

    def posterior_mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def to_json(self, particles_file: str | None = None) -> dict:
        return {
            "model_id": self.model_id,
            "log_evidence": float(self.log_evidence),
            "temperatures": [float(t) for t in self.schedule.temperatures],
            "stages": list(self.schedule.stage),
            "stage_boundary": self.schedule.stage_boundary,
            "log_increments": [float(v) for v in self.schedule.log_increments],
            "resampled": list(map(bool, self.schedule.resampled)),
            "acceptance": [float(a) for a in self.acceptance],
            "lambda": [float(v) for v in self.lambdas],
            "stage1_pass": [float(v) for v in self.stage1_pass],
            "pf_calls": int(self.pf_calls),
            "seconds": float(self.seconds),
            "particles_file": particles_file,
        }

    def write(self, json_path, particles_path) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(str(particles_path.name) if hasattr(particles_path, "name") else particles_path),
                      fh, indent=2)
        self.write_particles(particles_path)

    def write_particles(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["weight", *self.param_names])
            for wt, row in zip(self.weights, self.particles):
                w.writerow([repr(float(wt)), *(repr(float(v)) for v in row)])


def adapt_lambda(lam: float, acc_rate: float) -> float:
    if not 0.0 <= acc_rate <= 1.0:
        raise ValueError("acceptance rate must lie in [0, 1]")
    if acc_rate > LAMBDA_RAISE:
        return lam * 2.0
    if acc_rate < LAMBDA_DROP:
        return lam * 0.5
    return lam


def weighted_posterior_estimate(particles, W, h: Callable = lambda th: th):
    """``sum_m W_m h(theta_m)``; ``h`` maps a ``(M, d)`` batch to ``(M,)`` or ``(M, k)``."""
    W = np.asarray(W, dtype=float)
    vals = np.asarray(h(np.asarray(particles, dtype=float)), dtype=float)
    if vals.ndim == 0:
        vals = np.full(W.shape, float(vals))
    return np.tensordot(W, vals, axes=(0, 0))


def posterior_model_probabilities(log_evidences: dict, log_priors: dict | None = None) -> dict:
    """Softmax of log prior plus log evidence; equal priors when ``log_priors`` is None."""
    keys = list(log_evidences)
    if log_priors is None:
        log_priors = {k: 0.0 for k in keys}
    if set(log_priors) != set(keys):
        raise ValueError("model keys of evidences and priors differ")
    a = np.array([log_priors[k] + log_evidences[k] for k in keys], dtype=float)
    a = np.where(np.isnan(a), -np.inf, a)
    lse = log_sum_exp(a)
    if not np.isfinite(lse):
        raise ValueError("no model has positive posterior mass")
    return dict(zip(keys, map(float, np.exp(a - lse))))


def weighted_covariance(theta, W):
    mu = W @ theta
    c = theta - mu
    cov = (c * W[:, None]).T @ c
    return 0.5 * (cov + cov.T) + RIDGE * np.eye(theta.shape[1])


class _Tempering:
    """Shared bookkeeping for the two samplers."""

    def __init__(self, model: ModelSpec, cfg: SamplerConfig, rng):
        self.model, self.cfg, self.rng = model, cfg, rng
        self.schedule = TemperSchedule()
        self.log_evidence = 0.0
        self.acceptance: list[float] = []
        self.stage1_pass: list[float] = []
        self.lambdas: list[float] = []
        self.lam = cfg.lambda0
        self.pf_calls = 0
        self.t0 = time.perf_counter()
        self.logv = np.zeros(cfg.n_outer)

    def abort(self, msg, **extra):
        diag = {
            "model_id": self.model.model_id,
            "temperatures": list(self.schedule.temperatures),
            "log_evidence_so_far": self.log_evidence,
            "pf_calls": self.pf_calls,
            **extra,
        }
        raise NumericalAbort(f"{self.model.model_id}: {msg}", diag)

    def reweight(self, state: MoveBatch, log_u, prev, nxt, stage):
        """Incremental weighting to exponent ``nxt``; resamples if ESS drops below target."""
        delta = nxt - prev
        with np.errstate(invalid="ignore"):
            inc = np.where(np.isneginf(log_u), -np.inf, delta * log_u)
        logv = self.logv + inc
        logv = np.where(np.isnan(logv), -np.inf, logv)
        W, logmean = normalize_logweights_rows(logv[None, :])
        W, logmean = W[0], float(logmean[0])
        if not np.isfinite(logmean):
            self.abort("all particle weights are zero", stage=stage, temperature=nxt)
        ess = float(ess_fraction(W))
        sigma = weighted_covariance(state.theta, W)
        resample = ess < self.cfg.ess_star
        final = nxt == 1.0
        if resample:
            anc = systematic_resample(W, self.rng.random())
            state = state.take(anc)
            self.logv = np.zeros_like(self.logv)
        counted = resample or final
        if counted:
            self.log_evidence += logmean
        if not resample:
            # keep carried weights relative to the mass already counted
            self.logv = logv - logmean if counted else logv
        s = self.schedule
        s.stage.append(stage)
        s.temperatures.append(float(nxt))
        s.log_increments.append(logmean if counted else 0.0)
        s.resampled.append(bool(resample))
        s.ess.append(ess)
        return state, sigma

    def record_moves(self, acc_rate, pass_rate):
        self.acceptance.append(float(acc_rate))
        self.stage1_pass.append(float(pass_rate))
        self.lambdas.append(self.lam)
        self.lam = adapt_lambda(self.lam, float(acc_rate))

    def next_temperature(self, log_u, prev, cess_star, fixed):
        if fixed is not None:
            if not fixed:
                self.abort("fixed schedule exhausted before reaching 1")
            return fixed.pop(0)
        W, _ = normalize_logweights_rows(self.logv[None, :])
        try:
            return solve_temperature(W[0], log_u, prev, cess_star)
        except ValueError as e:
            self.abort(f"cannot choose the next temperature ({e})", temperature=prev)

    def check_steps(self):
        if self.schedule.n_steps >= self.cfg.max_steps:
            self.abort("maximum number of tempering steps reached")

    def result(self, state: MoveBatch) -> EvidenceEstimate:
        W, _ = normalize_logweights_rows(self.logv[None, :])
        return EvidenceEstimate(
            self.model.model_id, tuple(self.model.param_names), float(self.log_evidence), self.schedule,
            state.theta, W[0], self.acceptance, self.lambdas, self.stage1_pass, self.pf_calls,
            time.perf_counter() - self.t0,
        )


def _initial_batch(model: ModelSpec, M, rng):
    theta = model.as_batch(model.prior_sample(rng, M))
    return MoveBatch(theta, np.zeros(M), model.additional_loglik(theta), model.prior_logpdf(theta))


def _fixed_list(schedule):
    if schedule is None or schedule == "adaptive":
        return None
    temps = [float(t) for t in schedule]
    if not temps or temps[-1] != 1.0 or np.any(np.diff([0.0] + temps) <= 0):
        raise ValueError("fixed schedule must increase strictly from above 0 to exactly 1")
    return temps


def run_smc_single_stage(model: ModelSpec, y, cfg: SamplerConfig, schedule: Sequence[float] | str | None = None,
                         rng=None) -> EvidenceEstimate:
    """Temper the whole likelihood ``p_hat(y|theta) p(m|theta)`` from prior to posterior.

    ``schedule`` is ``None``/``"adaptive"`` for CESS-driven temperatures
    (target ``cess_star_beta``) or an explicit increasing list ending at 1.
    """
    fixed = _fixed_list(schedule)
    rng = np.random.default_rng() if rng is None else rng
    S = _Tempering(model, cfg, rng)
    pfcfg = cfg.pf
    state = _initial_batch(model, cfg.n_outer, rng)
    state.loghat = np.atleast_1d(estimate_loglik(model, state.theta, y, pfcfg, rng))
    S.pf_calls += cfg.n_outer
    alpha = 0.0
    while alpha < 1.0:
        S.check_steps()
        log_u = state.loghat + state.logadd
        nxt = S.next_temperature(log_u, alpha, cfg.cess_star_beta, fixed)
        state, sigma = S.reweight(state, log_u, alpha, nxt, stage=0)
        alpha = nxt
        prop = ProposalConfig(sigma, S.lam)
        acc = np.zeros(cfg.n_outer)
        for _ in range(cfg.mcmc_moves_per_step):
            state, a, calls = pmcmc_move(model, y, state, alpha, alpha, prop, pfcfg, rng)
            S.pf_calls += calls
            acc += a
        S.record_moves(acc.mean() / cfg.mcmc_moves_per_step, 1.0)
    return S.result(state)


def run_smc_two_stage(model: ModelSpec, y, cfg: SamplerConfig, rng=None) -> EvidenceEstimate:
    """Temper ``p(m|theta)`` first with PF-free moves, then ``p_hat(y|theta)`` with delayed acceptance."""
    rng = np.random.default_rng() if rng is None else rng
    S = _Tempering(model, cfg, rng)
    pfcfg = cfg.pf
    M = cfg.n_outer
    state = _initial_batch(model, M, rng)

    alpha = 0.0
    while alpha < 1.0:
        S.check_steps()
        log_u = state.logadd
        nxt = S.next_temperature(log_u, alpha, cfg.cess_star_alpha, None)
        state, sigma = S.reweight(state, log_u, alpha, nxt, stage=1)
        alpha = nxt
        prop = ProposalConfig(sigma, S.lam)
        acc = np.zeros(M)
        for _ in range(cfg.mcmc_moves_per_step):
            state, a = mh_move(model, state, alpha, prop, rng)
            acc += a
        S.record_moves(acc.mean() / cfg.mcmc_moves_per_step, 1.0)

    state.loghat = np.atleast_1d(estimate_loglik(model, state.theta, y, pfcfg, rng))
    S.pf_calls += M

    beta = 0.0
    while beta < 1.0:
        S.check_steps()
        log_u = state.loghat
        nxt = S.next_temperature(log_u, beta, cfg.cess_star_beta, None)
        state, sigma = S.reweight(state, log_u, beta, nxt, stage=2)
        beta = nxt
        prop = ProposalConfig(sigma, S.lam)
        acc = np.zeros(M)
        passed = np.zeros(M)
        for _ in range(cfg.mcmc_moves_per_step):
            state, s1, a, calls = da_pmcmc_move(model, y, state, beta, 1.0, prop, pfcfg, rng)
            S.pf_calls += calls
            acc += a
            passed += s1
        k = cfg.mcmc_moves_per_step
        S.record_moves(acc.mean() / k, passed.mean() / k)
    return S.result(state)


__all__ = [
    "SamplerConfig", "TemperSchedule", "EvidenceEstimate", "adapt_lambda", "weighted_posterior_estimate",
    "posterior_model_probabilities", "weighted_covariance", "run_smc_single_stage", "run_smc_two_stage",
]
