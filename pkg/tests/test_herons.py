import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binom, nbinom, poisson

from ipmsmc.core import CountSeries
from ipmsmc.models import build_model, fixture_theta, simulate_dataset
from ipmsmc.models.common import CovariateTable, MArray
from ipmsmc.models.herons import (
    HeronsData,
    HeronsLinks,
    herons_initial_sample,
    herons_layout,
    herons_link,
    herons_obs_logpdf,
    herons_productivity,
    herons_recovery_loglik,
    herons_transition_sample,
    initial_means,
    recovery_cells,
    regime_transition_matrix,
    threshold_cutpoints,
    threshold_levels,
)
from ipmsmc.oracles import hmm_forward_loglik
from ipmsmc.pf import run_pf_simple


def covs(T, rng=None):
    frost = np.arange(T, dtype=float) if rng is None else rng.poisson(10, T).astype(float)
    return CovariateTable(np.arange(1950, 1950 + T), np.zeros(T), frost)


def test_links():
    params = dict.fromkeys(herons_layout("constant", 2), 0.0)
    assert herons_link(params, covs(5), 2, 1) == (0.5, 0.5, 0.5)
    params["omega"] = -2.0
    assert herons_link(params, covs(5), 2, 1)[2] == pytest.approx(0.1192029220, abs=1e-9)
    params.update(alpha2=0.7, beta2=0.0)
    assert len({herons_link(params, covs(5), t, 2)[0] for t in range(5)}) == 1


def test_initial_means_and_moments(rng):
    assert initial_means(4).tolist() == [1000.0, 1000.0, 1000.0, 2000.0]
    assert initial_means(2).tolist() == [1000.0, 4000.0]
    x = herons_initial_sample(1, 100_000, 4, rng)[0]
    tot = x.sum(axis=1)
    assert abs(tot.mean() - 5000) < 4 * tot.std() / np.sqrt(tot.size)
    # NegBin with prob 1/100: variance = mean / p
    assert x[:, 0].var() == pytest.approx(1000 * 100, rel=0.03)
    x = herons_initial_sample(2, 3, 2, rng, K=3)
    assert x.shape == (2, 3, 3) and set(np.unique(x[..., 2])) <= {0, 1, 2}


def test_observation_density():
    zero = np.zeros((1, 1, 3))
    assert herons_obs_logpdf(np.array([0.0]), zero, 0, 3)[0, 0] == 0.0
    assert herons_obs_logpdf(np.array([0.0]), zero, 4, 3)[0, 0] == -np.inf
    s = np.array([[[7, 60, 40]]])
    assert herons_obs_logpdf(np.array([0.0]), s, 100, 3)[0, 0] == pytest.approx(nbinom.logpmf(100, 100, 0.5))
    # variance tends to the mean as kappa -> 1: the Poisson limit
    logit = np.log((1 - 1e-12) / 1e-12)
    for y in (80, 100, 115):
        assert herons_obs_logpdf(np.array([logit]), s, y, 3)[0, 0] == pytest.approx(poisson.logpmf(y, 100), abs=1e-6)


def test_observation_sampler_moments(rng):
    omega = 0.0
    draws = rng.negative_binomial(np.exp(omega) * 100, 0.5, 200_000)
    assert draws.mean() == pytest.approx(100, abs=4 * np.sqrt(200 / draws.size))
    assert draws.var() == pytest.approx(200, rel=0.03)


def test_transition_edge_cases(rng):
    phi = np.full((2, 3), 0.5)
    prev = np.zeros((2, 10, 3), dtype=np.int64)
    prev[..., 0] = 5
    nxt = herons_transition_sample(phi, np.ones(2), prev, 3, rng)
    assert np.all(nxt[..., 0] == 0)
    prev = rng.integers(0, 50, size=(2, 10, 3))
    nxt = herons_transition_sample(np.ones((2, 3)), np.zeros(2), prev, 3, rng)
    np.testing.assert_array_equal(nxt[..., 0], 0)
    np.testing.assert_array_equal(nxt[..., 1], prev[..., 0])
    np.testing.assert_array_equal(nxt[..., 2], prev[..., 1] + prev[..., 2])


def test_transition_moments(rng):
    n = 100_000
    prev = np.broadcast_to(np.array([10, 20, 30]), (1, n, 3))
    phi = np.array([[0.4, 0.7, 0.8]])
    nxt = herons_transition_sample(phi, np.array([1.5]), prev, 3, rng)[0]
    means = [1.5 * 0.4 * 50, 10 * 0.7, 50 * 0.8]
    var = [means[0], 10 * 0.7 * 0.3, 50 * 0.8 * 0.2]
    for a in range(3):
        assert abs(nxt[:, a].mean() - means[a]) < 4 * np.sqrt(var[a] / n)
        assert nxt[:, a].var() == pytest.approx(var[a], rel=0.03)


def enumerate_recovery(phi, lam, L):
    """Brute force over the year of death for one release with ``L`` intervals."""
    probs = np.zeros(L + 1)
    for death in range(L + 1):
        p = 1.0
        for k in range(min(death, L)):
            p *= phi
        if death < L:
            p *= 1 - phi
            probs[death] += p * lam
            probs[L] += p * (1 - lam)
        else:
            probs[L] += p
    return probs


def test_recovery_toy_example():
    phi = np.full((1, 2, 2), 0.5)
    lam = np.full((1, 3), 0.5)
    q = recovery_cells(phi, lam, 2, 0, 1)[0]
    np.testing.assert_allclose(q[0], [0.25, 0.125, 0.625])
    np.testing.assert_allclose(q[0], enumerate_recovery(0.5, 0.5, 2))
    np.testing.assert_allclose(q[1], [0.0, 0.25, 0.75])


def test_recovery_edge_cases():
    phi = np.full((1, 3, 6), 0.3)
    q = recovery_cells(phi, np.zeros((1, 7)), 3, 1, 5)[0]
    np.testing.assert_allclose(q[:, -1], 1.0)
    q = recovery_cells(np.zeros((1, 3, 6)), np.ones((1, 7)), 3, 1, 5)[0]
    np.testing.assert_allclose(np.diag(q[:, :-1]), 1.0)
    np.testing.assert_allclose(q[:, -1], 0.0)


def test_recovery_rows_sum_to_one(rng):
    T = 12
    names = herons_layout("constant", 4)
    L = HeronsLinks(rng.normal(0, 2, size=(1000, len(names))), names, "constant", 4, None, covs(T, rng))
    q = recovery_cells(L.phi(), 1 / (1 + np.exp(-L.logit_lam)), 4, 2, T - 2)
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=2), 1.0, atol=1e-12)


def test_recovery_loglik_matches_multinomial(rng):
    phi = np.full((1, 2, 4), 0.6)
    lam = np.full((1, 5), 0.3)
    m = MArray(np.array([0, 1, 2]), np.array([1, 2, 3]), np.array([[3, 2, 1, 14], [0, 4, 1, 15], [0, 0, 5, 15]]))
    q = recovery_cells(phi, lam, 2, 0, 2)[0]
    from scipy.stats import multinomial

    exact = sum(multinomial.logpmf(m.counts[i], m.counts[i].sum(), q[i]) for i in range(3))
    assert herons_recovery_loglik(phi, lam, m, 2)[0] == pytest.approx(exact)


def test_threshold_examples():
    assert threshold_levels([0.3]).tolist() == [pytest.approx(np.exp(0.3))]
    np.testing.assert_allclose(threshold_levels([0.0, 0.0]), [2.0, 1.0])
    np.testing.assert_allclose(threshold_cutpoints([0.0, 0.0], 100.0, 300.0), [200.0])
    params = {"zeta1": 0.0, "zeta2": 0.0, "eta1": 0.0, "eta2": 0.0}
    ctx = {"y_range": (100.0, 300.0)}
    assert herons_productivity("threshold", params, 3, {**ctx, "y": 150}) == 2.0
    assert herons_productivity("threshold", params, 3, {**ctx, "y": 250}) == 1.0
    with pytest.raises(ValueError):
        herons_productivity("threshold", {"eta1": 0.0}, 0, ctx)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6), st.data())
def test_threshold_monotone(zeta, data):
    eta = data.draw(st.lists(st.floats(-10, 10), min_size=len(zeta), max_size=len(zeta)))
    nu = threshold_levels(zeta)
    tau = threshold_cutpoints(eta, 50.0, 150.0)
    assert np.all(np.diff(nu) < 0)
    assert np.all(np.diff(tau) > 0)
    assert np.all((tau > 50.0) & (tau < 150.0))


@given(st.integers(1, 5), st.data())
def test_regime_rows_are_distributions(K, data):
    varpi = np.array(data.draw(st.lists(st.floats(-30, 30), min_size=K * K, max_size=K * K))).reshape(K, K)
    P = regime_transition_matrix(varpi)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_regime_uniform_matrix():
    P = regime_transition_matrix(np.zeros((2, 2)))
    np.testing.assert_allclose(P, 0.5)
    np.testing.assert_allclose(np.array([0.5, 0.5]) @ P, [0.5, 0.5])


def test_other_productivities():
    assert herons_productivity("constant", {"psi": 0.2}, 0, {}) == pytest.approx(np.exp(0.2))
    f = np.array([1.0, -1.0])
    assert herons_productivity("frost", {"gamma0": 0.1, "gamma1": 0.5}, 1, {"frost": f}) == pytest.approx(np.exp(0.6))
    assert herons_productivity("density", {"eps0": 0.0, "eps1": -1.0}, 1, {"y_tilde": 2.0}) == pytest.approx(np.exp(-2))
    p = {"zeta1": 0.0, "zeta2": -1.0}
    assert herons_productivity("regime", p, 0, {"regime": 1}) == pytest.approx(np.exp(-1.0))


def test_layout_dimensions():
    assert herons_layout("constant", 2) == ("omega", "alpha0", "beta0", "alpha1", "alpha2", "beta1", "beta2", "psi")
    assert len(herons_layout("regime", 4, 4)) == 31
    assert len(herons_layout("threshold", 4, 4)) == 19
    for bad in (("constant", 2, 2), ("threshold", 2, None), ("regime", 5, 2), ("linear", 2, None)):
        with pytest.raises(ValueError):
            herons_layout(*bad)


def test_simulation_release_rows(rng):
    desc = {"family": "herons", "productivity": "constant", "A": 2}
    data, truth = simulate_dataset(desc, fixture_theta(desc, 71), 71, 10, rng)
    assert data.marray.counts.shape == (43, 44)
    assert (data.t1, data.t2) == (27, 69)
    np.testing.assert_array_equal(data.marray.releases, 10)
    assert len(truth["latents"]) == 71


def test_simulation_immediate_recovery(rng):
    desc = {"family": "herons", "productivity": "constant", "A": 2}
    theta = fixture_theta(desc, 8, {"alpha1": -60.0, "alpha2": -60.0, "beta1": 0.0, "beta2": 0.0,
                                    "alpha0": 60.0, "beta0": 0.0})
    data, _ = simulate_dataset(desc, theta, 8, 25, rng)
    counts = data.marray.counts
    np.testing.assert_array_equal(np.diag(counts), 25)
    assert counts.sum() == 25 * counts.shape[0]


def test_simulated_cell_frequencies(rng):
    desc = {"family": "herons", "productivity": "frost", "A": 3}
    theta = fixture_theta(desc, 6)
    R = 10_000
    data, _ = simulate_dataset(desc, theta, 6, R, rng)
    names = herons_layout("frost", 3)
    L = HeronsLinks(theta[None], names, "frost", 3, None, data.covariates)
    q = recovery_cells(L.phi(), 1 / (1 + np.exp(-L.logit_lam)), 3, data.t1, data.t2)[0]
    se = np.sqrt(q * (1 - q) / R)
    assert np.all(np.abs(data.marray.counts / R - q) <= 4 * se + 1e-12)


@pytest.mark.parametrize("prod,K", [("constant", None), ("frost", None), ("density", None), ("threshold", 2),
                                    ("regime", 2)])
def test_variants_evaluate(prod, K, rng):
    desc = {"family": "herons", "productivity": prod, "A": 2, "K": K}
    theta = fixture_theta(desc, 12)
    data, _ = simulate_dataset(desc, theta, 12, 30, rng)
    model = build_model(desc, data)
    assert np.isfinite(model.additional_loglik(theta[None]))[0]
    ll, _ = run_pf_simple(model, theta, data.counts.values, 200, rng)
    assert np.isfinite(ll)


def tiny_regime_model():
    """Regime-switching herons dynamics from a small initial support, with its exact forward oracle."""
    T = 3
    cov = covs(T)
    m = MArray(np.array([0, 1]), np.array([1, 2]), np.zeros((2, 3), dtype=np.int64))
    y = np.array([2, 2, 3])
    data = HeronsData(CountSeries(y, cov.years), m, cov)
    model = build_model({"family": "herons", "productivity": "regime", "A": 2, "K": 2}, data)

    def initial_sample(theta, n, rng):
        B = np.atleast_2d(theta).shape[0]
        return np.stack([rng.integers(0, 3, (B, n)), rng.integers(1, 4, (B, n)), rng.integers(0, 2, (B, n))], axis=-1)

    model = dataclasses.replace(model, ssm=dataclasses.replace(model.ssm, initial_sample=initial_sample))
    vals = dict.fromkeys(model.param_names, 0.0)
    vals.update(zeta1=0.0, zeta2=-1.0, varpi1_1=1.0, varpi2_2=0.5)
    theta = np.array([vals[n] for n in model.param_names])

    C = 20
    x1, x2, r = np.meshgrid(np.arange(C + 1), np.arange(C + 1), np.arange(2), indexing="ij")
    x1, x2, r = x1.ravel(), x2.ravel(), r.ravel()
    init = ((x1 <= 2) & (x2 >= 1) & (x2 <= 3)).astype(float)
    init /= init.sum()
    nu = threshold_levels([0.0, -1.0])
    P = regime_transition_matrix(np.array([[1.0, 0.0], [0.0, 0.5]]))
    phi = 0.5
    trans = (P[r[:, None], r[None, :]]
             * poisson.pmf(x1[None, :], nu[r[None, :]] * phi * x2[:, None])
             * binom.pmf(x2[None, :], (x1 + x2)[:, None], phi))
    trans /= trans.sum(axis=1, keepdims=True)

    def emission(idx, y_t):
        states = np.stack([x1[idx], x2[idx], r[idx]], axis=-1)[None]
        return herons_obs_logpdf(np.array([0.0]), states, y_t, 2)[0]

    return model, theta, y, hmm_forward_loglik(init, trans, emission, y)


def test_regime_filter_matches_exact_forward(rng):
    model, theta, y, exact = tiny_regime_model()
    reps = 400
    ll, _ = run_pf_simple(model, np.tile(theta, (reps, 1)), y, 500, rng)
    lik = np.exp(ll - exact)
    assert abs(lik.mean() - 1.0) < 3 * lik.std(ddof=1) / np.sqrt(reps)
