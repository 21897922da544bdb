import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from epoxy_uq import stats as S


# ---------------------------------------------------------------- streams


def test_streams_depend_only_on_key():
    a = S.rng_stream(7, 3).standard_normal(5)
    S.rng_stream(7, 1).standard_normal(100)  # unrelated draws in between
    b = S.rng_stream(7, 3).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, S.rng_stream(7, 4).standard_normal(5))
    assert not np.array_equal(a, S.rng_stream(8, 3).standard_normal(5))


def test_seed_policy_matches_stream():
    assert np.array_equal(S.RngSeedPolicy(11).stream(2, 5).random(4), S.rng_stream(11, 2, 5).random(4))


# ---------------------------------------------------------------- moment matching


def test_lognormal_from_moments_closed_form():
    d = S.lognormal_from_moments(40.0, 4.0)
    assert d.sigma_ln == pytest.approx(math.sqrt(math.log(1.01)), rel=1e-14)
    assert d.mu_ln == pytest.approx(math.log(40.0) - 0.5 * math.log(1.01), rel=1e-14)


def test_lognormal_degenerate_limit():
    d = S.lognormal_from_moments(40.0, 0.0)
    assert d.sigma_ln == 0.0 and d.mu_ln == pytest.approx(math.log(40.0))


def test_lognormal_sample_mean():
    x = S.lognormal_from_moments(40.0, 4.0).sample(S.rng_stream(1), 100_000)
    assert x.mean() == pytest.approx(40.0, rel=0.01)
    assert np.all(x > 0)


def test_beta_from_moments_closed_form():
    d = S.beta_from_moments(0.8, 0.08)
    assert (d.alpha, d.beta) == (pytest.approx(19.2, rel=1e-12), pytest.approx(4.8, rel=1e-12))


@given(st.floats(0.05, 0.2))
def test_beta_symmetric_case(sigma):
    d = S.beta_from_moments(0.5, sigma)
    assert d.alpha == pytest.approx(d.beta, rel=1e-14)


def test_beta_sample_support_and_std():
    x = S.beta_from_moments(0.8, 0.08).sample(S.rng_stream(2), 100_000)
    assert np.all((x >= 0) & (x <= 1))
    assert x.std(ddof=1) == pytest.approx(0.08, rel=0.02)


@given(st.floats(0.1, 1e3), st.floats(0.01, 2.0))
def test_lognormal_round_trip(mu, cv):
    d = S.lognormal_from_moments(mu, cv * mu)
    assert d.mean() == pytest.approx(mu, rel=1e-12)
    assert math.sqrt(d.var()) == pytest.approx(cv * mu, rel=1e-12)


@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_beta_round_trip(mu, frac):
    sigma = frac * math.sqrt(mu * (1 - mu))
    d = S.beta_from_moments(mu, sigma)
    assert d.mean() == pytest.approx(mu, rel=1e-12)
    assert math.sqrt(d.var()) == pytest.approx(sigma, rel=1e-12)


def test_moment_matching_errors():
    with pytest.raises(ValueError):
        S.lognormal_from_moments(0.0, 1.0)
    with pytest.raises(ValueError):
        S.beta_from_moments(0.5, 0.6)
    with pytest.raises(ValueError):
        S.beta_from_moments(1.2, 0.1)


# ---------------------------------------------------------------- critical values


def test_quoted_critical_values():
    assert S.t_critical(2, 0.95) == pytest.approx(4.30, abs=0.01)
    assert S.t_critical(47, 0.95) == pytest.approx(2.01, abs=0.01)
    assert S.t_critical(10**6, 0.95) == pytest.approx(1.96, abs=0.005)
    assert S.normal_critical(0.95) == pytest.approx(1.96, abs=0.005)


@given(st.integers(1, 500), st.floats(0.5, 0.999))
def test_t_critical_matches_reference_quantile(dof, level):
    ref = sps.t.ppf(0.5 * (1 + level), dof)
    assert S.t_critical(dof, level) == pytest.approx(ref, rel=1e-8)


@given(st.floats(0.5, 0.99))
def test_t_critical_decreasing_in_dof(level):
    vals = [S.t_critical(d, level) for d in (1, 2, 3, 5, 10, 30, 100, 1000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_t_critical_argument_checks():
    with pytest.raises(ValueError):
        S.t_critical(0, 0.95)
    with pytest.raises(ValueError):
        S.t_critical(3, 1.0)


# ---------------------------------------------------------------- multivariate normal


def test_mvn_zero_covariance_returns_mean():
    mean = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(S.mvn_sample(mean, np.zeros((3, 3)), S.rng_stream(0)), mean)


def test_mvn_diagonal_matches_univariate_streams():
    mean, sd = np.array([1.0, 2.0]), np.array([0.5, 3.0])
    x = S.mvn_sample(mean, np.diag(sd**2), S.rng_stream(4))
    z = S.rng_stream(4).standard_normal(2)
    assert np.allclose(x, mean + sd * z, rtol=1e-15)


def _cov3():
    a = np.array([[2.0, 0.3, -0.5], [0.3, 1.0, 0.2], [-0.5, 0.2, 0.7]])
    return a


def test_mvn_sample_covariance():
    x = S.mvn_sample(np.zeros(3), _cov3(), S.rng_stream(5), size=100_000)
    _, c = S.sample_moments(x)
    assert np.linalg.norm(c - _cov3()) / np.linalg.norm(_cov3()) < 0.05


def test_mvn_covariance_error_rate():
    # Frobenius error of the sample covariance falls like n^-1/2
    ns = [100, 1_000, 10_000, 100_000]
    errs = []
    for n in ns:
        e = [
            np.linalg.norm(S.sample_moments(S.mvn_sample(np.zeros(3), _cov3(), S.rng_stream(6, r), size=n))[1] - _cov3())
            for r in range(8)
        ]
        errs.append(np.mean(e))
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert -0.65 < slope < -0.35


def test_near_singular_covariance_gets_jitter():
    v = np.array([1.0, 2.0, 3.0])
    cov = np.outer(v, v)  # rank one
    x = S.mvn_sample(np.zeros(3), cov, S.rng_stream(1), size=10)
    assert np.all(np.isfinite(x))


def test_indefinite_covariance_is_rejected():
    with pytest.raises(S.CovarianceError, match="smallest eigenvalue"):
        S.mvn_sample(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), S.rng_stream(0))


# ---------------------------------------------------------------- moments


def test_sample_moments_small_cases():
    _, c = S.sample_moments(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.all(c == 0)
    m, c = S.sample_moments(np.array([0.0, 1.0]))
    assert m[0] == 0.5 and c[0, 0] == 0.5
    with pytest.raises(ValueError):
        S.sample_moments(np.array([[1.0, 2.0]]))


def test_sample_moments_dual_implementation():
    x = S.rng_stream(9).standard_normal((1000, 2)) * [3.0, 0.1] + [5.0, -1.0]
    m, c = S.sample_moments(x)
    # two-pass loop implementation
    n = len(x)
    mean = [sum(r[j] for r in x) / n for j in range(2)]
    cov = [[sum((r[i] - mean[i]) * (r[j] - mean[j]) for r in x) / (n - 1) for j in range(2)] for i in range(2)]
    assert np.allclose(m, mean, rtol=1e-12)
    assert np.allclose(c, cov, rtol=1e-12)


def test_skewness_signs():
    rng = S.rng_stream(3)
    assert abs(S.sample_skewness(rng.standard_normal(50_000))) < 0.05
    assert S.sample_skewness(rng.exponential(size=50_000)) == pytest.approx(2.0, rel=0.1)


@pytest.mark.parametrize(
    "dist",
    [S.Normal(1.0, 2.0), S.UniformSym(3.0), S.LogNormal(0.1, 0.3), S.Beta(2.0, 5.0)],
)
def test_distribution_sample_moments(dist):
    x = dist.sample(S.rng_stream(12), 200_000)
    assert x.mean() == pytest.approx(dist.mean(), abs=0.01 * math.sqrt(dist.var()) * 3 + 1e-12)
    assert x.var(ddof=1) == pytest.approx(dist.var(), rel=0.02)


def test_empirical_distribution():
    d = S.Empirical(np.array([1.0, 2.0, 4.0]))
    x = d.sample(S.rng_stream(0), 1000)
    assert set(np.unique(x)) <= {1.0, 2.0, 4.0}
    with pytest.raises(ValueError):
        S.Empirical(np.array([]))


def test_invalid_scales_are_rejected():
    with pytest.raises(ValueError):
        S.Normal(0.0, -1.0)
    with pytest.raises(ValueError):
        S.UniformSym(-1.0)
    with pytest.raises(ValueError):
        S.Beta(0.0, 1.0)
