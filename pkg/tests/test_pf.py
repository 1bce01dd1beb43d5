import numpy as np
import pytest
from scipy.stats import norm

from ipmsmc.core import ModelSpec, StateSpaceModel, gaussian_prior
from ipmsmc.oracles import (
    LgssmSpec,
    conjugate_gaussian_evidence,
    conjugate_gaussian_model,
    finite_hmm_model,
    flat_model,
    hmm_forward_loglik,
    kalman_loglik,
    lgssm_model,
    lgssm_simulate,
)
from ipmsmc.pf import PfConfig, estimate_loglik, run_pf_adaptive, run_pf_simple

SPEC = LgssmSpec.scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0)


@pytest.fixture(scope="module")
def lgssm_data():
    _, y = lgssm_simulate(SPEC, 10, np.random.default_rng(5))
    return lgssm_model(SPEC), y, kalman_loglik(SPEC, y)


def ratio_mean(ll, exact):
    r = np.exp(ll - exact)
    return r.mean(), r.std(ddof=1) / np.sqrt(r.size)


@pytest.mark.parametrize("mode", ["always-multinomial", "multinomial", "systematic"])
def test_unbiased_small_lgssm(lgssm_data, mode):
    model, y, exact = lgssm_data
    ll = estimate_loglik(model, np.zeros((3000, 1)), y, PfConfig(30, 0.5, mode), np.random.default_rng(1))
    m, se = ratio_mean(ll, exact)
    assert abs(m - 1) < 4 * se


def test_optimal_proposal_reduces_variance(lgssm_data):
    model, y, exact = lgssm_data
    th = np.zeros((2000, 1))
    plain = estimate_loglik(model, th, y, PfConfig(30), np.random.default_rng(2))
    opt = estimate_loglik(model, th, y, PfConfig(30, use_proposal=True), np.random.default_rng(2))
    m, se = ratio_mean(opt, exact)
    assert abs(m - 1) < 4 * se
    assert opt.var() < plain.var()


def test_threshold_one_multinomial_is_simple_pf(lgssm_data):
    model, y, _ = lgssm_data
    th = np.zeros((7, 1))
    a, ca = run_pf_simple(model, th, y, 25, np.random.default_rng(9))
    b, cb = run_pf_adaptive(model, th, y, PfConfig(25, 1.0, "multinomial"), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert cb.resampled.all()


def test_threshold_zero_never_resamples(lgssm_data):
    model, y, _ = lgssm_data
    _, cloud = run_pf_adaptive(model, np.zeros((3, 1)), y, PfConfig(20, 0.0), np.random.default_rng(0))
    assert not cloud.resampled.any()


def test_resample_flags_follow_ess(lgssm_data):
    model, y, _ = lgssm_data
    _, cloud = run_pf_adaptive(model, np.zeros((4, 1)), y, PfConfig(50, 0.7), np.random.default_rng(3))
    # the decision at step t uses the ESS of the carried weights at t
    np.testing.assert_array_equal(cloud.resampled, cloud.ess[:, :-1] < 0.7)
    assert np.all((cloud.ess >= 1 / 50 - 1e-12) & (cloud.ess <= 1 + 1e-12))


def test_scalar_and_batch_shapes(lgssm_data):
    model, y, _ = lgssm_data
    single = estimate_loglik(model, [0.0], y, PfConfig(10), np.random.default_rng(0))
    assert isinstance(single, float)
    assert estimate_loglik(model, np.zeros((3, 1)), y, PfConfig(10), np.random.default_rng(0)).shape == (3,)


def test_keep_history(lgssm_data):
    model, y, _ = lgssm_data
    _, cloud = run_pf_adaptive(model, np.zeros((2, 1)), y, PfConfig(10, 1.0), np.random.default_rng(0), keep_history=True)
    assert len(cloud.ancestors) == len(y) - 1
    assert cloud.ancestors[0].shape == (2, 10)


def test_single_particle_is_valid(lgssm_data):
    model, y, _ = lgssm_data
    ll = estimate_loglik(model, np.zeros((5, 1)), y, PfConfig(1), np.random.default_rng(0))
    assert np.all(np.isfinite(ll) | np.isneginf(ll))


def test_flat_and_exact_models():
    model, y = flat_model(1)
    assert estimate_loglik(model, [0.3], y, PfConfig(5), np.random.default_rng(0)) == 0.0
    data = np.array([0.5, 1.5, -0.2])
    cm, cy = conjugate_gaussian_model(0.0, 1.0, 1.0, data)
    exact = norm(0.7, 1.0).logpdf(data).sum()
    assert estimate_loglik(cm, [0.7], cy, PfConfig(1), np.random.default_rng(0)) == pytest.approx(exact)
    assert conjugate_gaussian_evidence(0.0, 1.0, 1.0, data) < 0


def test_all_particles_dead_gives_minus_inf():
    def obs(theta, t, states, y_t):
        return np.full(states.shape[:2], -np.inf)

    ssm = StateSpaceModel(lambda th, n, rng: np.zeros((th.shape[0], n, 1)), lambda th, t, p, rng: p, obs)
    lp, sm = gaussian_prior(["a"], [0.0], [1.0])
    model = ModelSpec("dead", ("a",), lp, sm, ssm)
    for mode in ("systematic", "always-multinomial"):
        assert estimate_loglik(model, [0.0], [0, 0, 0], PfConfig(4, 0.5, mode), np.random.default_rng(0)) == -np.inf


def test_hmm_pf_matches_forward():
    init = np.array([0.5, 0.3, 0.2])
    trans = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7]])
    means = np.array([-1.0, 0.0, 2.0])
    emis = lambda s, y: norm.logpdf(y, loc=means[s])
    y = np.array([-1.1, 0.3, 2.2, 1.8, -0.5, 0.0])
    exact = hmm_forward_loglik(init, trans, emis, y)
    model = finite_hmm_model(init, trans, emis)
    ll = estimate_loglik(model, np.zeros((3000, 1)), y, PfConfig(20), np.random.default_rng(4))
    m, se = ratio_mean(ll, exact)
    assert abs(m - 1) < 4 * se


def test_config_validation():
    for kw in ({"n_particles": 0}, {"n_particles": 5, "ess_threshold": 1.5}, {"n_particles": 5, "resampling": "x"}):
        with pytest.raises(ValueError):
            PfConfig(**kw)
    model, y = flat_model(1)
    with pytest.raises(ValueError):
        run_pf_adaptive(model, [0.0], y, PfConfig(5, use_proposal=True), np.random.default_rng(0))
