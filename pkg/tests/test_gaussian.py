import numpy as np
import pytest
from hypothesis import given, strategies as st

from fmps.errors import ContractViolation
from fmps.gaussian import (
    GaussianSpec,
    exact_posterior,
    log_density,
    marginal_at,
    score_at,
    true_velocity,
)
from fmps.schedule import FlowSchedule
from fmps.velocity import GaussianVelocityField

S = FlowSchedule()


def test_spec_rejects_nonpositive_variance():
    with pytest.raises(ContractViolation):
        GaussianSpec(np.zeros(2), np.array([1.0, 0.0]))


def test_marginal_examples():
    std = GaussianSpec.standard(3)
    assert np.allclose(marginal_at(std, S, 0.5).var, 0.5)
    m0 = marginal_at(GaussianSpec(np.array([1.0, -2.0]), np.array([0.5, 2.0])), S, 0.0)
    assert np.array_equal(m0.mean, [1.0, -2.0]) and np.array_equal(m0.var, [0.5, 2.0])
    m1 = marginal_at(GaussianSpec(np.array([1.0, -2.0]), np.array([0.5, 2.0])), S, 1.0)
    assert np.array_equal(m1.mean, [0.0, 0.0]) and np.array_equal(m1.var, [1.0, 1.0])


@given(st.floats(0, 1))
def test_standard_marginal_variance(t):
    assert marginal_at(GaussianSpec.standard(1), S, t).var[0] == pytest.approx((1 - t) ** 2 + t**2)


def test_score_examples():
    spec = GaussianSpec(np.array([1.0, 0.0]), np.array([2.0, 1.0]))
    m = marginal_at(spec, S, 0.4)
    assert np.allclose(score_at(spec, S, m.mean[None], 0.4).data, 0.0)
    assert score_at(GaussianSpec.standard(1), S, np.array([[1.0]]), 0.5).data[0, 0] == pytest.approx(-2.0)


def test_score_matches_log_density_finite_difference(rng):
    spec = GaussianSpec(np.array([0.5, -1.0, 2.0]), np.array([0.3, 1.5, 4.0]))
    h = 1e-5
    for t in (0.1, 0.5, 0.9):
        x = rng.standard_normal((4, 3))
        fd = np.zeros_like(x)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd[:, j] = (log_density(spec, S, x + e, t) - log_density(spec, S, x - e, t)) / (2 * h)
        s = score_at(spec, S, x, t).data
        assert np.max(np.abs(s - fd) / np.maximum(1, np.abs(fd))) < 1e-6


def test_log_density_against_scipy(rng):
    from scipy.stats import multivariate_normal

    spec = GaussianSpec(np.array([0.5, -1.0]), np.array([0.3, 1.5]))
    m = marginal_at(spec, S, 0.3)
    x = rng.standard_normal((5, 2))
    ref = multivariate_normal(m.mean, np.diag(m.var)).logpdf(x)
    assert np.allclose(log_density(spec, S, x, 0.3), ref, atol=1e-12)


def test_true_velocity_examples():
    std = GaussianSpec.standard(2)
    x = np.array([[1.0, 0.0], [-3.0, 2.5]])
    assert np.allclose(true_velocity(std, S, x, 0.5).data, 0.0, atol=1e-15)
    assert np.allclose(true_velocity(std, S, np.array([[1.0, 0.0]]), 0.75).data, [[0.8, 0.0]], atol=1e-12)


@given(st.floats(0.01, 0.99), st.floats(-3, 3))
def test_true_velocity_standard_closed_form(t, x):
    v = true_velocity(GaussianSpec.standard(1), S, np.array([[x]]), t).data[0, 0]
    assert v == pytest.approx(x * (2 * t - 1) / ((1 - t) ** 2 + t**2), abs=1e-9)


def test_true_velocity_equals_field(rng):
    spec = GaussianSpec(np.array([0.5, -1.0, 2.0]), np.array([0.3, 1.5, 4.0]))
    field = GaussianVelocityField(spec, S)
    x = rng.standard_normal((16, 3))
    for t in np.linspace(0.05, 0.95, 13):
        assert np.allclose(true_velocity(spec, S, x, t).data, field(x, t).data, atol=1e-9, rtol=0)


def test_unconditional_integration_recovers_prior_moments():
    spec = GaussianSpec.standard(2)
    x = np.random.default_rng(0).standard_normal((4096, 2))
    T = 1000
    for i in range(T):
        t, tn = 1 - i / T, 1 - (i + 1) / T
        x = x + (tn - t) * true_velocity(spec, S, x, t).data
    assert np.all(np.abs(x.mean(0)) < 0.05)
    assert np.all(np.abs(x.var(0) - 1.0) < 0.1)


def test_posterior_exact_mask_observation():
    post = exact_posterior(GaussianSpec.standard(3), np.array([1.0, 0.0, 0.0]), np.array([2.0, 0.0, 0.0]), 0.0)
    assert np.allclose(post.mean, [2.0, 0.0, 0.0])
    assert post.var[0] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(post.var[1:], 1.0)


def test_posterior_uninformative_is_prior():
    spec = GaussianSpec(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    post = exact_posterior(spec, np.eye(2), np.array([9.0, 9.0]), np.inf)
    assert np.array_equal(post.mean, spec.mean)
    assert np.allclose(post.cov, np.diag(spec.var))
    big = exact_posterior(spec, np.eye(2), np.array([9.0, 9.0]), 1e12)
    assert np.allclose(big.mean, spec.mean, atol=1e-9)


def test_posterior_sum_observation_normal_equations():
    post = exact_posterior(GaussianSpec.standard(2), np.array([[1.0, 1.0]]), np.array([2.0]), 1.0)
    # brute-force joint Gaussian conditioning on (x1, x2, y)
    joint = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 3.0]])
    mean = joint[:2, 2] / joint[2, 2] * 2.0
    cov = joint[:2, :2] - np.outer(joint[:2, 2], joint[2, :2]) / joint[2, 2]
    assert np.allclose(post.mean, mean) and np.allclose(post.mean, [2 / 3, 2 / 3])
    assert np.allclose(post.cov, cov)


def test_posterior_ill_posed_rejected():
    with pytest.raises(ContractViolation):
        exact_posterior(GaussianSpec.standard(2), np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([1.0, 2.0]), 0.0)
    with pytest.raises(ContractViolation):
        exact_posterior(GaussianSpec.standard(2), np.array([1.0, 0.0]), np.array([1.0, 0.0]), -1.0)
