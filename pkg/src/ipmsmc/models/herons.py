"""Grey-heron integrated population model.

Age-structured counts with negative-binomial observations, ring-recovery
m-array, and five productivity submodels.  Times are 0-based: survival
``phi[a, t]`` acts between years ``t`` and ``t + 1``; recovery ``lam[t]``
is the probability of reporting a bird that died in ``(t, t + 1]``.
Regime-switching states carry the (0-based) regime as a trailing column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CountSeries, ModelSpec, StateSpaceModel, gaussian_prior
from .common import CovariateTable, MArray, expit, multinomial_logpmf, negbin_logpmf, split_params, zscore

PRODUCTIVITY = ("constant", "frost", "density", "threshold", "regime")
INIT_P = 1.0 / 100.0
INIT_TOTAL = 5000.0
MAX_RATE = 1e12


@dataclass(frozen=True)
class HeronsData:
    counts: CountSeries
    marray: MArray
    covariates: CovariateTable

    def __post_init__(self):
        T = self.counts.T
        if len(self.covariates) != T:
            raise ValueError("covariates must cover every count year")
        rel, occ = self.marray.release_times, self.marray.occasions
        t1, t2 = int(rel[0]), int(rel[-1])
        if not np.array_equal(rel, np.arange(t1, t2 + 1)) or not np.array_equal(occ, np.arange(t1 + 1, t2 + 2)):
            raise ValueError("ring-recovery m-array must have consecutive releases t1..t2 and occasions t1+1..t2+1")
        if t2 > T - 2:
            raise ValueError("last release must precede the final count year")

    @property
    def T(self):
        return self.counts.T

    @property
    def t1(self):
        return int(self.marray.release_times[0])

    @property
    def t2(self):
        return int(self.marray.release_times[-1])


def herons_layout(productivity: str, A: int, K: int | None = None):
    if productivity not in PRODUCTIVITY:
        raise ValueError(f"productivity must be one of {PRODUCTIVITY}")
    if A not in (2, 3, 4):
        raise ValueError("number of age classes must be 2, 3 or 4")
    needs_k = productivity in ("threshold", "regime")
    if needs_k and (K is None or K < 1):
        raise ValueError(f"{productivity} productivity needs K >= 1")
    if not needs_k and K is not None:
        raise ValueError(f"{productivity} productivity takes no K")
    names = ["omega", "alpha0", "beta0"]
    names += [f"alpha{a}" for a in range(1, A + 1)] + [f"beta{a}" for a in range(1, A + 1)]
    if productivity == "constant":
        names += ["psi"]
    elif productivity == "frost":
        names += ["gamma0", "gamma1"]
    elif productivity == "density":
        names += ["eps0", "eps1"]
    elif productivity == "threshold":
        names += [f"zeta{k}" for k in range(1, K + 1)] + [f"eta{k}" for k in range(1, K + 1)]
    else:
        names += [f"zeta{k}" for k in range(1, K + 1)]
        names += [f"varpi{k}_{l}" for k in range(1, K + 1) for l in range(1, K + 1)]
    return tuple(names)


def threshold_levels(zeta):
    """``nu_k = sum_{l >= k} exp(zeta_l)``; strictly decreasing in ``k``."""
    e = np.exp(np.asarray(zeta, dtype=float))
    return np.cumsum(e[..., ::-1], axis=-1)[..., ::-1]


def threshold_cutpoints(eta, y_min, y_max):
    """``tau_k`` for ``k = 1..K-1`` from softmax cumulative sums of ``eta``."""
    eta = np.asarray(eta, dtype=float)
    w = np.exp(eta - eta.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return y_min + (y_max - y_min) * np.cumsum(w, axis=-1)[..., :-1]


def regime_transition_matrix(varpi):
    """Row-wise softmax of a ``(..., K, K)`` array."""
    varpi = np.asarray(varpi, dtype=float)
    w = np.exp(varpi - varpi.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


class HeronsLinks:
    """Batched link-scale quantities for a ``(B, d)`` parameter array."""

    def __init__(self, theta, names, productivity, A, K, covariates: CovariateTable, counts=None,
                 y_range=None, y_norm=None):
        P = split_params(theta, names)
        self.B = np.atleast_2d(theta).shape[0]
        self.A, self.K, self.productivity = A, K, productivity
        self.T = len(covariates)
        f = covariates.frost_norm
        w = covariates.time_norm
        self.frost = f
        self.logit_kappa = P["omega"]
        self.logit_lam = P["alpha0"][:, None] + P["beta0"][:, None] * w[None, :]
        alpha = np.stack([P[f"alpha{a}"] for a in range(1, A + 1)], axis=1)
        beta = np.stack([P[f"beta{a}"] for a in range(1, A + 1)], axis=1)
        # (B, A, T-1)
        self.logit_phi = alpha[:, :, None] + beta[:, :, None] * f[None, None, : self.T - 1]
        self.P = P
        if productivity in ("threshold", "regime"):
            self.zeta = np.stack([P[f"zeta{k}"] for k in range(1, K + 1)], axis=1)
            self.nu = threshold_levels(self.zeta)
        if productivity == "threshold":
            eta = np.stack([P[f"eta{k}"] for k in range(1, K + 1)], axis=1)
            y_min, y_max = y_range if y_range is not None else (np.min(counts), np.max(counts))
            self.tau = threshold_cutpoints(eta, y_min, y_max)
        if productivity == "regime":
            varpi = np.stack(
                [P[f"varpi{k}_{l}"] for k in range(1, K + 1) for l in range(1, K + 1)], axis=1
            ).reshape(self.B, K, K)
            self.trans = regime_transition_matrix(varpi)
        if productivity == "density":
            if y_norm is None:
                _, mu, sd = zscore(counts)
                y_norm = (mu, sd)
            self.y_norm = y_norm

    def phi(self):
        return expit(self.logit_phi)

    def productivity_at(self, t, y_t=None, regime=None):
        """``rho_t`` per batch row, or per particle ``(B, N)`` for regime switching."""
        kind = self.productivity
        P = self.P
        if kind == "constant":
            return np.exp(P["psi"])
        if kind == "frost":
            # log rho_t uses the previous year's frost days; the first year reuses its own
            return np.exp(P["gamma0"] + P["gamma1"] * self.frost[max(t - 1, 0)])
        if kind == "density":
            mu, sd = self.y_norm
            return np.exp(P["eps0"] + P["eps1"] * (y_t - mu) / sd)
        if kind == "threshold":
            level = np.sum(self.tau <= y_t, axis=1)
            return np.take_along_axis(self.nu, level[:, None], axis=1)[:, 0]
        return np.take_along_axis(self.nu, regime, axis=1)


def herons_productivity(kind, params: dict, t: int, context: dict):
    """Scalar ``rho_t`` for one parameter set given as ``{name: value}``.

    ``context`` supplies ``y`` (threshold), ``y_tilde`` (density), ``frost``
    (frost: normalised series), ``y_range`` (threshold) or ``regime``.
    """
    if kind in ("threshold", "regime"):
        K = sum(1 for n in params if n.startswith("zeta"))
        if K < 1:
            raise ValueError("step-function productivity needs K >= 1")
        nu = threshold_levels([params[f"zeta{k}"] for k in range(1, K + 1)])
        if kind == "regime":
            return float(nu[int(context["regime"])])
        tau = threshold_cutpoints([params[f"eta{k}"] for k in range(1, K + 1)], *context["y_range"])
        return float(nu[int(np.sum(tau <= context["y"]))])
    if kind == "constant":
        return float(np.exp(params["psi"]))
    if kind == "frost":
        return float(np.exp(params["gamma0"] + params["gamma1"] * context["frost"][max(t - 1, 0)]))
    if kind == "density":
        return float(np.exp(params["eps0"] + params["eps1"] * context["y_tilde"]))
    raise ValueError(f"unknown productivity model {kind!r}")


def herons_link(params: dict, covariates: CovariateTable, t: int, a: int):
    """``(phi_{a,t}, lambda_t, kappa)`` for one parameter set (``a`` is 1-based)."""
    f = covariates.frost_norm[t]
    w = covariates.time_norm[t]
    phi = expit(params[f"alpha{a}"] + params[f"beta{a}"] * f)
    lam = expit(params["alpha0"] + params["beta0"] * w)
    return float(phi), float(lam), float(expit(params["omega"]))


def initial_means(A: int):
    mu0 = INIT_TOTAL / 5.0
    return np.array([mu0] * (A - 1) + [INIT_TOTAL - (A - 1) * mu0])


def herons_initial_sample(B, n, A, rng, K=None):
    mu = initial_means(A)
    size = mu * INIT_P / (1.0 - INIT_P)
    x = rng.negative_binomial(np.broadcast_to(size, (B, n, A)), INIT_P)
    if K is not None:
        x = np.concatenate([x, rng.integers(0, K, size=(B, n, 1))], axis=-1)
    return x


def herons_obs_logpdf(logit_kappa, states, y_t, A):
    """NegBin(size = kappa/(1-kappa) * adults, prob = kappa); mean adults, variance adults/kappa."""
    adults = states[..., 1:A].sum(axis=-1)
    size = np.exp(logit_kappa)[:, None] * adults
    return negbin_logpmf(y_t, size, logit_prob=np.asarray(logit_kappa)[:, None])


def herons_transition_sample(phi, rho, prev, A, rng):
    """One year of the age-structured SSM.

    ``phi`` is ``(B, A)`` survival for the previous year; ``rho`` is ``(B,)``
    or ``(B, N)`` productivity.  ``prev`` holds counts only.
    """
    adults = prev[..., 1:A].sum(axis=-1)
    rho = rho[:, None] if np.ndim(rho) == 1 else rho
    first = rng.poisson(np.minimum(rho * phi[:, [0]] * adults, MAX_RATE))
    cols = [first]
    for a in range(1, A - 1):
        cols.append(rng.binomial(prev[..., a - 1], np.broadcast_to(phi[:, [a]], adults.shape)))
    cols.append(rng.binomial(prev[..., A - 2] + prev[..., A - 1], np.broadcast_to(phi[:, [A - 1]], adults.shape)))
    return np.stack(cols, axis=-1)


def sample_regime(trans, prev_regime, rng):
    """Draw ``r_t`` for every particle from rows of per-batch transition matrices."""
    rows = np.take_along_axis(trans, prev_regime[:, :, None], axis=1)  # (B, N, K)
    cum = np.cumsum(rows, axis=-1)
    u = rng.random(prev_regime.shape)
    return np.minimum(np.sum(u[..., None] >= cum, axis=-1), trans.shape[-1] - 1)


def recovery_cells(phi, lam, A, t1, t2):
    """``(B, rows, cols+1)`` ring-recovery cell probabilities.

    ``phi`` is ``(B, A, T-1)`` and ``lam`` ``(B, T)``.  Row ``t`` (release at
    ``t1..t2``) and column ``s`` (``t1+1..t2+1``) hold
    ``prod_{k<j} phi_k * (1 - phi_j) * lam_{s-1}`` with ``j = s - t`` the
    age in the year of death.
    """
    B = phi.shape[0]
    n_rows, n_cols = t2 - t1 + 1, t2 - t1 + 1
    q = np.zeros((B, n_rows, n_cols + 1))
    for i, t in enumerate(range(t1, t2 + 1)):
        L = t2 + 1 - t
        ages = np.minimum(np.arange(1, L + 1), A) - 1
        times = t + np.arange(L)
        seq = phi[:, ages, times]
        surv = np.concatenate([np.ones((B, 1)), np.cumprod(seq, axis=1)[:, :-1]], axis=1)
        q[:, i, i: i + L] = surv * (1.0 - seq) * lam[:, times]
    q[:, :, -1] = np.clip(1.0 - q[:, :, :-1].sum(axis=2), 0.0, 1.0)
    return q


def herons_recovery_loglik(phi, lam, marray: MArray, A):
    t1, t2 = int(marray.release_times[0]), int(marray.release_times[-1])
    q = recovery_cells(phi, lam, A, t1, t2)
    return multinomial_logpmf(marray.counts[None], q).sum(axis=1)


def herons_variant(productivity: str, A: int, data: HeronsData, K: int | None = None) -> ModelSpec:
    names = herons_layout(productivity, A, K)
    cov = data.covariates
    y = data.counts.values
    mean = np.array([-2.0 if n == "omega" else 0.0 for n in names])
    var = np.array([4.0 if n == "omega" else 1.0 for n in names])
    logprior, sample = gaussian_prior(names, mean, var)
    regime = productivity == "regime"
    ydiff = productivity in ("density", "threshold")

    def links(theta):
        return HeronsLinks(theta, names, productivity, A, K, cov, counts=y)

    def additional(theta):
        L = links(theta)
        out = herons_recovery_loglik(L.phi(), expit(L.logit_lam), data.marray, A)
        return np.where(np.isnan(out), -np.inf, out)

    def initial_sample(theta, n, rng):
        return herons_initial_sample(np.atleast_2d(theta).shape[0], n, A, rng, K if regime else None)

    def transition_sample(theta, t, prev, rng):
        L = links(theta)
        phi = expit(L.logit_phi[:, :, t - 1])
        if regime:
            r = sample_regime(L.trans, prev[..., A], rng)
            rho = L.productivity_at(t - 1, regime=r)
            x = herons_transition_sample(phi, rho, prev[..., :A], A, rng)
            return np.concatenate([x, r[..., None]], axis=-1)
        rho = L.productivity_at(t - 1, y_t=y[t - 1] if ydiff else None)
        return herons_transition_sample(phi, rho, prev, A, rng)

    def obs_logpdf(theta, t, states, y_t):
        return herons_obs_logpdf(np.atleast_2d(theta)[:, names.index("omega")], states, y_t, A)

    ssm = StateSpaceModel(initial_sample, transition_sample, obs_logpdf)
    suffix = f"_K{K}" if K is not None else ""
    return ModelSpec(
        model_id=f"herons_{productivity}_A{A}{suffix}",
        param_names=names,
        prior_logpdf=logprior,
        prior_sample=sample,
        ssm=ssm,
        additional_loglik=additional,
        prior_mean=mean,
        prior_var=var,
        info={"family": "herons", "productivity": productivity, "A": A, "K": K, "T": data.T},
    )


def simulate_herons(productivity, A, theta, T, releases, rng, K=None, t1=None, t2=None, covariates=None,
                    y_range=None, y_norm=None, first_year=1928):
    """Forward-simulate a herons dataset.

    Releases happen at 0-based years ``t1..t2`` (defaults: the 43 years
    before the final one, or every year when ``T`` is shorter, mirroring
    the real study's ringing period).  ``releases`` is an int or a per-release array.
    Observation-driven productivity uses ``y_range``/``y_norm`` as the
    normalisation (the real series is not known while it is simulated); by
    default both are scaled to the expected initial adult total.
    """
    names = herons_layout(productivity, A, K)
    theta = np.asarray(getattr(theta, "values", theta), dtype=float)
    if t1 is None:
        t1 = max(0, T - 44)
    if t2 is None:
        t2 = T - 2
    if covariates is None:
        years = np.arange(first_year, first_year + T)
        covariates = CovariateTable(years, np.zeros(T), rng.poisson(10.0, T).astype(float))
    if y_range is None or y_norm is None:
        # expected initial adult total sets the scale of the unseen series
        m = float(initial_means(A)[1:].sum())
        y_range = y_range or (0.5 * m, 2.0 * m)
        y_norm = y_norm or (m, 0.25 * m)
    L = HeronsLinks(theta[None, :], names, productivity, A, K, covariates,
                    counts=np.array([0.0, 1.0]), y_range=y_range, y_norm=y_norm)
    phi = L.phi()
    regime = productivity == "regime"
    x = herons_initial_sample(1, 1, A, rng, K if regime else None)
    latents = [x[0, 0].copy()]
    y = np.zeros(T, dtype=np.int64)
    omega = L.logit_kappa[0]

    def observe(state):
        adults = state[1:A].sum()
        return rng.negative_binomial(np.exp(omega) * adults, expit(omega)) if adults > 0 else 0

    y[0] = observe(x[0, 0])
    for t in range(1, T):
        if regime:
            r = sample_regime(L.trans, x[..., A], rng)
            rho = L.productivity_at(t - 1, regime=r)
            xc = herons_transition_sample(phi[:, :, t - 1], rho, x[..., :A], A, rng)
            x = np.concatenate([xc, r[..., None]], axis=-1)
        else:
            rho = L.productivity_at(t - 1, y_t=y[t - 1])
            x = herons_transition_sample(phi[:, :, t - 1], rho, x, A, rng)
        latents.append(x[0, 0].copy())
        y[t] = observe(x[0, 0])

    R = np.full(t2 - t1 + 1, int(releases)) if np.ndim(releases) == 0 else np.asarray(releases, dtype=np.int64)
    lam = expit(L.logit_lam[0])
    phi0 = phi[0]
    m = np.zeros((t2 - t1 + 1, t2 - t1 + 2), dtype=np.int64)
    for i, t in enumerate(range(t1, t2 + 1)):
        alive = np.ones(int(R[i]), bool)
        for s in range(t + 1, t2 + 2):
            age = min(s - t, A) - 1
            died = alive & (rng.random(alive.size) >= phi0[age, s - 1])
            found = died & (rng.random(alive.size) < lam[s - 1])
            m[i, s - t1 - 1] = found.sum()
            alive &= ~died
        m[i, -1] = R[i] - m[i, :-1].sum()
    marray = MArray(np.arange(t1, t2 + 1), np.arange(t1 + 1, t2 + 2), m)
    data = HeronsData(CountSeries(y, covariates.years), marray, covariates)
    state_names = [f"age{a}" for a in range(1, A + 1)] + (["regime"] if regime else [])
    truth = {"theta": dict(zip(names, map(float, theta))), "latents": np.array(latents).tolist(), "state_names": state_names}
    return data, truth
