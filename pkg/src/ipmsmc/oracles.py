"""Exact reference computations, test models and run diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ModelSpec, StateSpaceModel, gaussian_prior, log_sum_exp

LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# linear-Gaussian state-space models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LgssmSpec:
    """``x_1 ~ N(m0, P0)``, ``x_t = A x_{t-1} + N(0, Q)``, ``y_t = C x_t + N(0, R)``."""

    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        for name in ("A", "Q", "C", "R", "P0"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "m0", np.atleast_1d(np.asarray(self.m0, dtype=float)))
        dx, dy = self.A.shape[0], self.C.shape[0]
        if self.A.shape != (dx, dx) or self.Q.shape != (dx, dx) or self.P0.shape != (dx, dx):
            raise ValueError("state matrices have inconsistent shapes")
        if self.C.shape != (dy, dx) or self.R.shape != (dy, dy) or self.m0.shape != (dx,):
            raise ValueError("observation matrices have inconsistent shapes")
        for name in ("Q", "R", "P0"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")

    @classmethod
    def scalar(cls, a, q, c, r, m0, p0):
        return cls([[a]], [[q]], [[c]], [[r]], [m0], [[p0]])

    @property
    def dx(self):
        return self.A.shape[0]

    @property
    def dy(self):
        return self.C.shape[0]


def _mvn_logpdf(x, mean, cov):
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, x - mean)
    return -0.5 * (z @ z) - np.sum(np.log(np.diag(L))) - 0.5 * x.size * LOG2PI


def kalman_loglik(spec: LgssmSpec, y) -> float:
    """Exact log-likelihood by the prediction/update recursions."""
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    m, P = spec.m0.copy(), spec.P0.copy()
    total = 0.0
    for t in range(y.shape[0]):
        if t > 0:
            m = spec.A @ m
            P = spec.A @ P @ spec.A.T + spec.Q
        S = spec.C @ P @ spec.C.T + spec.R
        if np.linalg.matrix_rank(S) < S.shape[0]:
            raise np.linalg.LinAlgError("singular innovation covariance")
        resid = y[t] - spec.C @ m
        total += _mvn_logpdf(y[t], spec.C @ m, S)
        K = np.linalg.solve(S, spec.C @ P).T
        m = m + K @ resid
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
    return float(total)


def kalman_loglik_scalar(a, q, c, r, m0, p0, y) -> float:
    """Plain-float Kalman filter for 1-d models (independent cross-check)."""
    m, p, total = m0, p0, 0.0
    for t, yt in enumerate(y):
        if t:
            m, p = a * m, a * a * p + q
        s = c * c * p + r
        if s <= 0:
            raise ZeroDivisionError("singular innovation variance")
        e = yt - c * m
        total += -0.5 * (math.log(2 * math.pi * s) + e * e / s)
        k = p * c / s
        m, p = m + k * e, (1 - k * c) * p
    return total


def lgssm_simulate(spec: LgssmSpec, T: int, rng):
    x = rng.multivariate_normal(spec.m0, spec.P0)
    xs, ys = [], []
    for t in range(T):
        if t:
            x = spec.A @ x + rng.multivariate_normal(np.zeros(spec.dx), spec.Q)
        xs.append(x)
        ys.append(spec.C @ x + rng.multivariate_normal(np.zeros(spec.dy), spec.R))
    return np.array(xs), np.array(ys)


def _batched_mvn_logpdf(x, mean, cov):
    L = np.linalg.cholesky(cov)
    diff = x - mean
    z = np.linalg.solve(L, diff.reshape(-1, diff.shape[-1]).T).T.reshape(diff.shape)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(np.diag(L))) - 0.5 * cov.shape[0] * LOG2PI


def lgssm_model(spec: LgssmSpec, model_id="lgssm") -> ModelSpec:
    """An LGSSM as a ModelSpec with a fixed (dummy) parameter.

    The proposal hooks implement the locally optimal proposal
    ``p(x_t | x_{t-1}, y_t)``.
    """
    A, Q, C, R = spec.A, spec.Q, spec.C, spec.R
    LQ, LP0 = np.linalg.cholesky(Q), np.linalg.cholesky(spec.P0)
    Rinv = np.linalg.inv(R)

    def _post(prior_mean, prior_cov, y_t):
        S = np.linalg.inv(np.linalg.inv(prior_cov) + C.T @ Rinv @ C)
        S = 0.5 * (S + S.T)
        rhs = np.linalg.solve(prior_cov, prior_mean[..., None])[..., 0] + (C.T @ Rinv @ np.asarray(y_t, float))
        return rhs @ S.T, S

    def initial_sample(theta, n, rng):
        B = theta.shape[0]
        return spec.m0 + rng.standard_normal((B, n, spec.dx)) @ LP0.T

    def transition_sample(theta, t, prev, rng):
        return prev @ A.T + rng.standard_normal(prev.shape) @ LQ.T

    def obs_logpdf(theta, t, states, y_t):
        return _batched_mvn_logpdf(np.broadcast_to(np.asarray(y_t, float), states.shape[:-1] + (spec.dy,)), states @ C.T, R)

    def initial_logpdf(theta, states):
        return _batched_mvn_logpdf(states, spec.m0, spec.P0)

    def transition_logpdf(theta, t, prev, new):
        return _batched_mvn_logpdf(new, prev @ A.T, Q)

    def proposal_sample(theta, t, prev, y_t, n, rng):
        if prev is None:
            mean, S = _post(np.broadcast_to(spec.m0, (theta.shape[0], n, spec.dx)), spec.P0, y_t)
        else:
            mean, S = _post(prev @ A.T, Q, y_t)
        return mean + rng.standard_normal(mean.shape) @ np.linalg.cholesky(S).T

    def proposal_logpdf(theta, t, prev, new, y_t):
        if prev is None:
            mean, S = _post(np.broadcast_to(spec.m0, new.shape), spec.P0, y_t)
        else:
            mean, S = _post(prev @ A.T, Q, y_t)
        return _batched_mvn_logpdf(new, mean, S)

    ssm = StateSpaceModel(
        initial_sample, transition_sample, obs_logpdf,
        initial_logpdf, transition_logpdf, proposal_sample, proposal_logpdf,
    )
    logpdf, sample = gaussian_prior(["unused"], [0.0], [1.0])
    return ModelSpec(model_id, ("unused",), logpdf, sample, ssm, prior_mean=np.zeros(1), prior_var=np.ones(1))


# ---------------------------------------------------------------------------
# finite hidden Markov models
# ---------------------------------------------------------------------------


def hmm_forward_loglik(init, trans, emission_logpdf, y) -> float:
    """Exact ``log p(y)`` by the forward recursion in log space.

    ``emission_logpdf(states, y_t)`` evaluates the log emission density for
    an integer array of states.
    """
    init = np.asarray(init, dtype=float)
    trans = np.asarray(trans, dtype=float)
    if not np.allclose(trans.sum(axis=1), 1.0):
        raise ValueError("transition rows must sum to one")
    S = init.size
    idx = np.arange(S)
    with np.errstate(divide="ignore"):
        log_trans = np.log(trans)
        alpha = np.log(init) + emission_logpdf(idx, y[0])
    for t in range(1, len(y)):
        alpha = log_sum_exp(alpha[:, None] + log_trans, axis=0) + emission_logpdf(idx, y[t])
    return float(log_sum_exp(alpha))


def finite_hmm_model(init, trans, emission_logpdf, emission_sample=None, model_id="hmm") -> ModelSpec:
    """Finite-state HMM as a ModelSpec (fixed dummy parameter)."""
    init = np.asarray(init, dtype=float)
    cum = np.cumsum(np.asarray(trans, dtype=float), axis=1)
    cum[:, -1] = 1.0

    def initial_sample(theta, n, rng):
        B = theta.shape[0]
        return rng.choice(init.size, size=(B, n, 1), p=init)

    def transition_sample(theta, t, prev, rng):
        u = rng.random(prev.shape[:2])
        rows = cum[prev[..., 0]]
        return np.sum(u[..., None] >= rows, axis=-1)[..., None]

    def obs_logpdf(theta, t, states, y_t):
        return emission_logpdf(states[..., 0], y_t)

    logpdf, sample = gaussian_prior(["unused"], [0.0], [1.0])
    ssm = StateSpaceModel(initial_sample, transition_sample, obs_logpdf)
    return ModelSpec(model_id, ("unused",), logpdf, sample, ssm, prior_mean=np.zeros(1), prior_var=np.ones(1))


# ---------------------------------------------------------------------------
# conjugate Gaussian model
# ---------------------------------------------------------------------------


def conjugate_gaussian_evidence(prior_mean, prior_var, obs_var, data) -> float:
    """Exact ``log p(data)`` for i.i.d. ``N(mu, obs_var)`` data, ``mu ~ N(prior_mean, prior_var)``."""
    if prior_var <= 0 or obs_var <= 0:
        raise ValueError("variances must be positive")
    e = np.asarray(data, dtype=float).ravel() - prior_mean
    n = e.size
    if n == 0:
        return 0.0
    quad = (e @ e - prior_var * e.sum() ** 2 / (obs_var + n * prior_var)) / obs_var
    return float(-0.5 * n * (LOG2PI + math.log(obs_var)) - 0.5 * math.log1p(n * prior_var / obs_var) - 0.5 * quad)


def conjugate_gaussian_posterior(prior_mean, prior_var, obs_var, data):
    """Posterior ``(mean, var)`` of the mean parameter."""
    data = np.asarray(data, dtype=float).ravel()
    prec = 1.0 / prior_var + data.size / obs_var
    mean = (prior_mean / prior_var + data.sum() / obs_var) / prec
    return float(mean), float(1.0 / prec)


def _gauss_loglik(theta, data, obs_var):
    mu = np.atleast_2d(theta)[:, 0]
    data = np.asarray(data, dtype=float).ravel()
    n = data.size
    if n == 0:
        return np.zeros(mu.shape)
    ss = np.sum((data[None, :] - mu[:, None]) ** 2, axis=1)
    return -0.5 * n * (LOG2PI + math.log(obs_var)) - 0.5 * ss / obs_var


def conjugate_gaussian_model(prior_mean, prior_var, obs_var, count_data, extra_data=(), model_id="conjugate"):
    """Conjugate toy split into a "count" part and an "additional" part.

    The count part is a one-step SSM whose observation density ignores the
    latent state, so every particle filter returns the exact likelihood.
    Returns ``(model, y)`` with ``y`` the one-element observation sequence.
    """
    count_data = np.asarray(count_data, dtype=float).ravel()
    extra_data = np.asarray(extra_data, dtype=float).ravel()

    def initial_sample(theta, n, rng):
        return np.zeros((theta.shape[0], n, 1))

    def transition_sample(theta, t, prev, rng):
        return prev

    def obs_logpdf(theta, t, states, y_t):
        ll = _gauss_loglik(theta, y_t, obs_var)
        return np.broadcast_to(ll[:, None], states.shape[:2]).copy()

    def additional(theta):
        return _gauss_loglik(theta, extra_data, obs_var)

    logpdf, sample = gaussian_prior(["mu"], [prior_mean], [prior_var])
    ssm = StateSpaceModel(initial_sample, transition_sample, obs_logpdf)
    model = ModelSpec(
        model_id, ("mu",), logpdf, sample, ssm, additional,
        prior_mean=np.array([prior_mean]), prior_var=np.array([prior_var]),
    )
    return model, [count_data]


def flat_model(dim=1, model_id="flat") -> tuple[ModelSpec, list]:
    """Standard-normal prior with both likelihood terms identically one."""

    def initial_sample(theta, n, rng):
        return np.zeros((theta.shape[0], n, 1))

    def transition_sample(theta, t, prev, rng):
        return prev

    def obs_logpdf(theta, t, states, y_t):
        return np.zeros(states.shape[:2])

    names = tuple(f"x{i}" for i in range(dim))
    logpdf, sample = gaussian_prior(names, np.zeros(dim), np.ones(dim))
    ssm = StateSpaceModel(initial_sample, transition_sample, obs_logpdf)
    return ModelSpec(model_id, names, logpdf, sample, ssm, prior_mean=np.zeros(dim), prior_var=np.ones(dim)), [0.0]


# ---------------------------------------------------------------------------
# chain diagnostics
# ---------------------------------------------------------------------------


def autocorrelation(x, max_lag: int) -> np.ndarray:
    """Sample ACF at lags ``0..max_lag`` with the biased ``1/n`` normaliser."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n <= max_lag:
        raise ValueError("chain shorter than max_lag")
    d = x - x.mean()
    var = d @ d / n
    if var <= 0:
        raise ValueError("constant chain: autocorrelation undefined")
    size = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(d, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1] / n
    return acov / var


def time_rescaled_acf(x, max_lag: int, seconds_per_iter: float):
    """ACF with its lag axis expressed in seconds of computation."""
    acf = autocorrelation(x, max_lag)
    return np.arange(max_lag + 1) * seconds_per_iter, acf


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window."""
    x = np.asarray(x, dtype=float)
    acf = autocorrelation(x, x.size - 1)
    tau = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(tau.size)
    ok = window >= c * tau
    m = int(np.argmax(ok)) if ok.any() else tau.size - 1
    return float(tau[m])


def efficiency_gain(mse_a, time_a, mse_b, time_b) -> float:
    """``(mse_a * time_a) / (mse_b * time_b)``."""
    if min(mse_a, time_a, mse_b, time_b) <= 0:
        raise ValueError("inputs must be positive")
    return (mse_a * time_a) / (mse_b * time_b)


def average_mse(estimates, truth) -> float:
    """MSE per component, averaged over components."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    return float(np.mean((est - np.asarray(truth, dtype=float)) ** 2))
