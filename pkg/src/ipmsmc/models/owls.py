"""Little-owl integrated population model.

Counts of breeding females follow a two-class (juvenile, adult) SSM;
capture-recapture m-arrays for both ages and genders and nest-record
fecundity data make up the additional data.  Time indices are 0-based:
survival ``phi[t]`` and immigration ``eta[t]`` act between years ``t`` and
``t + 1`` (``t = 0..T-2``), recapture ``p[s]`` applies at year ``s``
(``s = 1..T-1``) and productivity ``rho[t]`` at every year.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CountSeries, ModelSpec, ParamVector, StateSpaceModel, gaussian_prior
from .common import (
    CovariateTable,
    MArray,
    expit,
    log1m_expit,
    log_expit,
    multinomial_logpmf,
    poisson_logpmf,
    split_params,
)

AGES = ("juv", "adult")
GENDERS = ("m", "f")
GROUPS = tuple((a, g) for a in AGES for g in GENDERS)
MAX_RATE = 1e12

# model index -> (shared beta, shared gamma, alpha3 pinned, alpha1 pinned)
VARIANTS = {
    1: (False, False, False, False),
    2: (True, False, False, False),
    3: (False, True, False, False),
    4: (False, True, True, False),
    5: (False, True, True, True),
    6: (True, True, False, False),
    7: (True, True, True, False),
    8: (True, True, True, True),
}


@dataclass(frozen=True)
class OwlsData:
    counts: CountSeries
    marrays: dict
    fecundity_N: np.ndarray
    fecundity_n: np.ndarray
    covariates: CovariateTable

    def __post_init__(self):
        T = self.counts.T
        if len(self.covariates) != T:
            raise ValueError("covariates must cover every count year")
        for key in GROUPS:
            if key not in self.marrays:
                raise ValueError(f"missing m-array for {key}")
            m = self.marrays[key]
            if not (np.array_equal(m.release_times, np.arange(T - 1)) and np.array_equal(m.occasions, np.arange(1, T))):
                raise ValueError(f"m-array {key} must have releases 0..T-2 and occasions 1..T-1")
        N = np.asarray(self.fecundity_N, dtype=np.int64)
        n = np.asarray(self.fecundity_n, dtype=np.int64)
        if N.shape != (T,) or n.shape != (T,) or np.any(N < 0) or np.any(n < 0):
            raise ValueError("fecundity records must be non-negative and cover every year")
        object.__setattr__(self, "fecundity_N", N)
        object.__setattr__(self, "fecundity_n", n)

    @property
    def T(self):
        return self.counts.T


def owls_layout(index: int, voles: bool, T: int):
    """Parameter names and pinned-to-zero names of owls model ``index``."""
    if index not in VARIANTS:
        raise ValueError(f"owls model index must be 1..8, got {index}")
    shared_beta, shared_gamma, no_a3, no_a1 = VARIANTS[index]
    names, pinned = ["alpha0"], []
    (pinned if no_a1 else names).append("alpha1")
    names.append("alpha2")
    (pinned if no_a3 else names).append("alpha3")
    names.append("delta0")
    (names if voles else pinned).append("delta1")
    names.append("beta1")
    names += ["beta"] if shared_beta else [f"beta{s}" for s in range(2, T + 1)]
    names += ["gamma"] if shared_gamma else [f"gamma{t}" for t in range(1, T + 1)]
    return tuple(names), tuple(pinned)


class OwlsLinks:
    """Batched link-scale quantities for a ``(B, d)`` parameter array."""

    def __init__(self, theta, names, pinned, covariates: CovariateTable):
        P = split_params(theta, names, pinned)
        B = np.atleast_2d(theta).shape[0]
        T = len(covariates)
        u = covariates.year_norm[: T - 1]
        c = covariates.voles[: T - 1]
        self.B, self.T = B, T
        self.alpha = np.stack([P["alpha0"], P["alpha1"], P["alpha2"], P["alpha3"]], axis=1)
        if "beta" in P:
            beta = np.repeat(P["beta"][:, None], T - 1, axis=1)
        else:
            beta = np.stack([P[f"beta{s}"] for s in range(2, T + 1)], axis=1)
        self.beta1 = P["beta1"]
        self.beta = beta
        if "gamma" in P:
            self.log_rho = np.repeat(P["gamma"][:, None], T, axis=1)
        else:
            self.log_rho = np.stack([P[f"gamma{t}"] for t in range(1, T + 1)], axis=1)
        self.log_eta = P["delta0"][:, None] + P["delta1"][:, None] * c[None, :]
        self._u = u

    def logit_phi(self, age: str, gender: str):
        a = self.alpha
        out = a[:, [0]] + a[:, [3]] * self._u[None, :]
        if gender == "m":
            out = out + a[:, [1]]
        if age == "adult":
            out = out + a[:, [2]]
        return out

    def logit_p(self, gender: str):
        return self.beta + (self.beta1[:, None] if gender == "m" else 0.0)

    def cell_logprobs(self, age: str, gender: str):
        """``(B, T-1, T-1)`` log cell probabilities (rows: release, cols: occasions 1..T-1)."""
        lphi_a = log_expit(self.logit_phi(age, gender))
        lphi_A = log_expit(self.logit_phi("adult", gender))
        lp_x = self.logit_p(gender)
        lp, l1mp = log_expit(lp_x), log1m_expit(lp_x)
        B, n = lphi_a.shape
        # C[k] = sum_{r=1}^{k} log(phi_A[r] (1 - p_r)), with p_r stored at index r-1
        logh = lphi_A[:, 1:] + l1mp[:, :-1]
        C = np.concatenate([np.zeros((B, 1)), np.cumsum(logh, axis=1)], axis=1)
        logq = lphi_a[:, :, None] + lp[:, None, :] + C[:, None, :] - C[:, :, None]
        valid = np.arange(n)[None, :] >= np.arange(n)[:, None]
        return np.where(valid[None], logq, -np.inf)


def owls_cells(links: OwlsLinks, age: str, gender: str):
    """Multinomial cell probabilities including the never-seen column."""
    q = np.exp(links.cell_logprobs(age, gender))
    never = np.clip(1.0 - q.sum(axis=2, keepdims=True), 0.0, 1.0)
    return np.concatenate([q, never], axis=2)


def owls_link(params: ParamVector, covariates: CovariateTable, t: int, age: str, gender: str, pinned=()):
    """``(phi_{a,g,t}, p_{g,t+1}, rho_t, eta_t)`` for a single parameter vector."""
    names = params.names
    missing = [n for n in ("alpha1", "alpha3", "delta1") if n not in names]
    L = OwlsLinks(params.values[None, :], names, tuple(pinned) or tuple(missing), covariates)
    phi = float(expit(L.logit_phi(age, gender)[0, t]))
    p = float(expit(L.logit_p(gender)[0, t]))
    return phi, p, float(np.exp(L.log_rho[0, t])), float(np.exp(L.log_eta[0, t]))


def owls_recapture_loglik(links: OwlsLinks, marrays: dict):
    total = np.zeros(links.B)
    for age, gender in GROUPS:
        m = marrays[(age, gender)]
        probs = owls_cells(links, age, gender)
        total = total + multinomial_logpmf(m.counts[None], probs).sum(axis=1)
    return total


def owls_fecundity_loglik(links: OwlsLinks, N, n):
    rate = np.asarray(N, dtype=float)[None, :] * np.exp(links.log_rho)
    return poisson_logpmf(np.asarray(n)[None, :], rate).sum(axis=1)


def owls_initial_sample(theta, n, rng):
    return rng.integers(0, 51, size=(np.atleast_2d(theta).shape[0], n, 2))


def owls_obs_logpdf(states, y_t):
    return poisson_logpmf(y_t, states.sum(axis=-1))


def _poisson(rng, lam):
    return rng.poisson(np.minimum(lam, MAX_RATE))


def owls_transition_sample(phi_juv, phi_adult, rho, eta, prev, rng):
    """One year of the female SSM; rate arguments are ``(B,)`` arrays."""
    tot = prev.sum(axis=-1)
    juv = _poisson(rng, tot * (rho * phi_juv / 2.0)[:, None])
    sur = rng.binomial(tot, np.broadcast_to(phi_adult[:, None], tot.shape))
    imm = _poisson(rng, tot * eta[:, None])
    return np.stack([juv, sur + imm], axis=-1)


def owls_variant(index: int, voles: bool, data: OwlsData) -> ModelSpec:
    T = data.T
    names, pinned = owls_layout(index, voles, T)
    cov = data.covariates
    y = data.counts.values
    mean = np.array([-2.0 if n == "delta0" else 0.0 for n in names])
    var = np.full(len(names), 2.0)
    logprior, sample = gaussian_prior(names, mean, var)

    def links(theta):
        return OwlsLinks(theta, names, pinned, cov)

    def additional(theta):
        L = links(theta)
        out = owls_recapture_loglik(L, data.marrays) + owls_fecundity_loglik(L, data.fecundity_N, data.fecundity_n)
        return np.where(np.isnan(out), -np.inf, out)

    def transition_sample(theta, t, prev, rng):
        L = links(theta)
        k = t - 1
        phi_j = expit(L.logit_phi("juv", "f")[:, k])
        phi_a = expit(L.logit_phi("adult", "f")[:, k])
        return owls_transition_sample(phi_j, phi_a, np.exp(L.log_rho[:, k]), np.exp(L.log_eta[:, k]), prev, rng)

    def obs_logpdf(theta, t, states, y_t):
        return owls_obs_logpdf(states, y_t)

    ssm = StateSpaceModel(owls_initial_sample, transition_sample, obs_logpdf)
    return ModelSpec(
        model_id=f"owls{index}{'v' if voles else ''}",
        param_names=names,
        prior_logpdf=logprior,
        prior_sample=sample,
        ssm=ssm,
        additional_loglik=additional,
        prior_mean=mean,
        prior_var=var,
        info={"family": "owls", "index": index, "voles": voles, "pinned": pinned, "T": T, "counts": y},
    )


def simulate_owls(index: int, voles: bool, theta, T: int, releases, rng, covariates=None, first_year=1978):
    """Forward-simulate an owls dataset.

    ``releases`` is an int (same release count for every group and year) or a
    dict ``{(age, gender): (T-1,) array}``.  Recapture histories are simulated
    individual by individual and aggregated into m-arrays.  Returns
    ``(OwlsData, truth)`` where ``truth`` holds the latent states.
    """
    names, pinned = owls_layout(index, voles, T)
    theta = np.asarray(getattr(theta, "values", theta), dtype=float)
    if covariates is None:
        years = np.arange(first_year, first_year + T)
        covariates = CovariateTable(years, rng.integers(0, 2, T).astype(float), np.zeros(T))
    L = OwlsLinks(theta[None, :], names, pinned, covariates)

    x = owls_initial_sample(theta[None, :], 1, rng)
    latents = [x[0, 0].copy()]
    for t in range(1, T):
        k = t - 1
        x = owls_transition_sample(
            expit(L.logit_phi("juv", "f")[:, k]), expit(L.logit_phi("adult", "f")[:, k]),
            np.exp(L.log_rho[:, k]), np.exp(L.log_eta[:, k]), x, rng,
        )
        latents.append(x[0, 0].copy())
    latents = np.array(latents)
    y = rng.poisson(latents.sum(axis=1))

    marrays = {}
    for age, gender in GROUPS:
        R = releases[(age, gender)] if isinstance(releases, dict) else np.full(T - 1, int(releases))
        phi_first = expit(L.logit_phi(age, gender)[0])
        phi_adult = expit(L.logit_phi("adult", gender)[0])
        p = expit(L.logit_p(gender)[0])
        m = np.zeros((T - 1, T), dtype=np.int64)
        for t in range(T - 1):
            alive = np.ones(int(R[t]), bool)
            pending = alive.copy()
            for s in range(t + 1, T):
                surv = phi_first[t] if s == t + 1 else phi_adult[s - 1]
                alive &= rng.random(alive.size) < surv
                seen = pending & alive & (rng.random(alive.size) < p[s - 1])
                m[t, s - 1] = seen.sum()
                pending &= ~seen
            m[t, -1] = pending.sum()
        marrays[(age, gender)] = MArray(np.arange(T - 1), np.arange(1, T), m)

    N = y.copy()
    n = rng.poisson(N * np.exp(L.log_rho[0]))
    data = OwlsData(CountSeries(y, covariates.years), marrays, N, n, covariates)
    truth = {"theta": dict(zip(names, map(float, theta))), "latents": latents.tolist(), "state_names": ["juv", "adult"]}
    return data, truth
