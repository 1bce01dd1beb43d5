import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp as scipy_lse

from ipmsmc.core import (
    CountSeries,
    DegenerateWeights,
    LatentState,
    ParamVector,
    gaussian_prior,
    joint_loglik,
    log_mean_exp,
    log_sum_exp,
    normalize_logweights,
    normalize_logweights_rows,
)
from ipmsmc.oracles import flat_model

finite = st.floats(-700, 700, allow_nan=False)


def test_log_sum_exp_basic():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(np.log(2))
    assert log_sum_exp([-np.inf, -np.inf]) == -np.inf
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + np.log(2))
    with pytest.raises(ValueError):
        log_sum_exp([])


def test_log_mean_exp():
    assert log_mean_exp([np.log(2.0), np.log(4.0)]) == pytest.approx(np.log(3.0))


@given(st.lists(finite, min_size=1, max_size=30))
def test_log_sum_exp_matches_scipy(xs):
    assert log_sum_exp(xs) == pytest.approx(scipy_lse(xs), rel=1e-12, abs=1e-12)


@given(st.lists(finite, min_size=1, max_size=30), finite)
def test_log_sum_exp_shift_equivariant(xs, c):
    xs = np.array(xs)
    assert log_sum_exp(xs + c) == pytest.approx(log_sum_exp(xs) + c, rel=1e-9, abs=1e-9)


@given(st.lists(st.one_of(finite, st.just(-np.inf)), min_size=1, max_size=30).filter(
    lambda v: any(np.isfinite(v))))
def test_normalize_sums_to_one(logw):
    W, logmean = normalize_logweights(logw)
    assert W.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(W >= 0)
    assert logmean == pytest.approx(log_sum_exp(logw) - np.log(len(logw)), abs=1e-9)


def test_normalize_degenerate():
    with pytest.raises(DegenerateWeights):
        normalize_logweights([-np.inf, -np.inf])


def test_normalize_rows_dead_row():
    W, lm = normalize_logweights_rows(np.array([[0.0, 0.0], [-np.inf, -np.inf]]))
    np.testing.assert_allclose(W, 0.5)
    assert lm[0] == 0.0 and lm[1] == -np.inf


def test_param_vector():
    p = ParamVector(("a", "b"), [1.0, 2.0])
    assert p["b"] == 2.0 and len(p) == 2
    assert p.as_dict() == {"a": 1.0, "b": 2.0}
    assert ParamVector.from_dict({"b": 2.0, "a": 1.0}, ["a", "b"]) == p
    assert ParamVector(("b", "a"), [2.0, 1.0]) != p
    for names, vals in [((), []), (("a", "a"), [1, 2]), (("a",), [np.nan]), (("a",), [1, 2])]:
        with pytest.raises(ValueError):
            ParamVector(names, vals)


def test_latent_state_from_row():
    assert LatentState.from_row([3, 4, 1], True) == LatentState((3, 4), 1)
    assert LatentState.from_row([3, 4], False).regime is None


def test_count_series_validation():
    assert CountSeries([1, 2, 3]).T == 3
    for bad in ([], [-1], [1.5]):
        with pytest.raises(ValueError):
            CountSeries(bad)
    with pytest.raises(ValueError):
        CountSeries([1, 2], years=[2000])


def test_gaussian_prior_reads_variance():
    logpdf, sample = gaussian_prior(["x"], [1.0], [4.0])
    from scipy.stats import norm
    assert logpdf(np.array([[3.0]]))[0] == pytest.approx(norm(1.0, 2.0).logpdf(3.0))
    draws = sample(np.random.default_rng(0), 20000)
    assert draws.std() == pytest.approx(2.0, rel=0.03)
    assert logpdf(np.array([[np.nan]]))[0] == -np.inf


def test_model_spec_batching():
    model, _ = flat_model(2)
    assert model.as_batch([0.0, 1.0]).shape == (1, 2)
    with pytest.raises(ValueError):
        model.as_batch([0.0])
    assert model.template().names == ("x0", "x1")
    assert joint_loglik(model, [0.0, 0.0], -1.5) == -1.5
