import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from wealthineq.samplers import (
    NotPositiveDefiniteError, NumericallyEmptyTruncation, draw_inverse_wishart, draw_mvn,
    draw_truncated_normal, rng_stream, truncated_normal,
)

N = 1_000_000


def _draws(a, b, n=N, mu=0.0, sigma=1.0, seed=1):
    return truncated_normal(rng_stream(seed, 0), np.full(n, mu), sigma, a, b)


def test_untruncated_mean():
    x = _draws(-np.inf, np.inf)
    assert abs(x.mean()) < 0.004
    assert x.std() == pytest.approx(1.0, abs=0.004)


def test_half_normal_mean():
    x = _draws(0.0, np.inf)
    assert x.min() >= 0
    assert abs(x.mean() - math.sqrt(2 / math.pi)) < 0.003


def test_far_tail_mean_matches_mills_ratio():
    x = _draws(10.0, np.inf)
    assert x.min() >= 10
    assert oracles.mills_mean(10.0) == pytest.approx(10.0981, abs=1e-4)
    assert abs(x.mean() - oracles.mills_mean(10.0)) < 0.002


def test_lower_tail_mirrors_upper_tail():
    x = _draws(-np.inf, -10.0, n=100_000)
    assert x.max() <= -10
    assert abs(-x.mean() - oracles.mills_mean(10.0)) < 0.002


@pytest.mark.parametrize("a, b", [
    (-1.0, 2.0),       # central, inverse CDF
    (7.0, np.inf),     # one-sided far tail, exponential rejection
    (8.0, 8.05),       # narrow far band, uniform rejection
    (-8.05, -8.0),     # mirrored narrow band
    (6.0, 30.0),       # wide far interval
])
def test_ks_against_truncated_cdf(a, b):
    x = _draws(a, b, n=100_000, seed=7)
    assert np.all((x >= a) & (x <= b))
    res = stats.kstest(x, lambda v: oracles.truncnorm_cdf(v, a, b))
    assert res.pvalue > 0.001


def test_location_and_scale():
    x = truncated_normal(rng_stream(3), np.full(200_000, 50.0), 4.0, 50.0, np.inf)
    assert abs(x.mean() - (50 + 4 * math.sqrt(2 / math.pi))) < 0.03


def test_empty_truncation_raises():
    with pytest.raises(NumericallyEmptyTruncation):
        draw_truncated_normal(rng_stream(1), 0.0, 1.0, 40.0, 41.0)  # mass near 1e-349


def test_interval_must_be_nonempty():
    with pytest.raises(ValueError):
        draw_truncated_normal(rng_stream(1), 0.0, 1.0, 2.5, 2.5)


@given(mu=st.floats(-50, 50), sigma=st.floats(1e-3, 20), a=st.floats(-60, 60), width=st.floats(1e-6, 100))
@settings(max_examples=300, deadline=None)
def test_draws_always_inside_interval(mu, sigma, a, width):
    b = a + width
    z_lo, z_hi = (a - mu) / sigma, (b - mu) / sigma
    if min(abs(z_lo), abs(z_hi)) > 35 and z_lo * z_hi > 0:
        return  # may be numerically empty; covered above
    x = truncated_normal(rng_stream(0), np.full(50, mu), sigma, a, b)
    assert np.all((x >= a) & (x <= b))


def test_streams_are_reproducible_and_distinct():
    a = rng_stream(42, 3).standard_normal(5)
    assert np.array_equal(a, rng_stream(42, 3).standard_normal(5))
    assert not np.array_equal(a, rng_stream(42, 4).standard_normal(5))
    assert not np.array_equal(a, rng_stream(43, 3).standard_normal(5))


def test_mvn_identity_moments():
    rng = rng_stream(5)
    x = np.array([draw_mvn(rng, np.zeros(3), np.eye(3)) for _ in range(50_000)])
    assert np.allclose(x.mean(axis=0), 0, atol=0.02)
    assert np.allclose(np.cov(x.T), np.eye(3), atol=0.03)


def test_mvn_dimension_one():
    rng = rng_stream(6)
    x = np.array([draw_mvn(rng, [3.0], [[4.0]])[0] for _ in range(50_000)])
    assert x.mean() == pytest.approx(3.0, abs=0.03) and x.std() == pytest.approx(2.0, abs=0.03)


def test_mvn_correlation():
    rng = rng_stream(8)
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    x = np.array([draw_mvn(rng, np.zeros(2), cov) for _ in range(N)])
    assert abs(np.corrcoef(x.T)[0, 1] - 0.5) < 0.005


def test_mvn_rejects_non_spd():
    with pytest.raises(NotPositiveDefiniteError, match="covariance not SPD"):
        draw_mvn(rng_stream(1), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_inverse_wishart_p1_is_inverse_gamma():
    rng = rng_stream(11)
    x = np.array([draw_inverse_wishart(rng, 10.0, [[3.0]])[0, 0] for _ in range(200_000)])
    assert x.mean() == pytest.approx(3.0 / 8.0, rel=0.01)
    res = stats.kstest(x[:20_000], stats.invgamma(5.0, scale=1.5).cdf)
    assert res.pvalue > 0.001


def test_inverse_wishart_p3_mean():
    rng = rng_stream(12)
    draws = np.array([draw_inverse_wishart(rng, 20.0, np.eye(3)) for _ in range(100_000)])
    target = np.eye(3) / 16.0
    assert np.linalg.norm(draws.mean(axis=0) - target) / np.linalg.norm(target) < 0.02


def test_inverse_wishart_general_scale_mean():
    S = np.array([[2.0, 0.6, 0.1], [0.6, 1.0, -0.3], [0.1, -0.3, 0.5]])
    rng = rng_stream(13)
    draws = np.array([draw_inverse_wishart(rng, 15.0, S) for _ in range(100_000)])
    target = S / (15.0 - 3 - 1)
    assert np.linalg.norm(draws.mean(axis=0) - target) / np.linalg.norm(target) < 0.02


@given(st.integers(1, 5), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_inverse_wishart_output_is_spd(p, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p, p))
    S = A @ A.T + 0.1 * np.eye(p)
    X = draw_inverse_wishart(rng_stream(seed), p + rng.uniform(0.01, 10), S)
    assert np.array_equal(X, X.T)
    assert np.all(np.linalg.eigvalsh(X) > 0)


def test_inverse_wishart_rejects_small_nu():
    with pytest.raises(ValueError):
        draw_inverse_wishart(rng_stream(1), 1.0, np.eye(2))
