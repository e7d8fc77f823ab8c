import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caplab.distributions import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    DiagGaussian,
    clamp_log_var,
    entropy,
    kl_backward,
    kl_divergence,
    kl_standard,
    log_prob,
    sample_reparam,
    sample_reparam_backward,
    standard_prior,
)
from caplab.errors import ConfigurationError

coord = st.floats(-3, 3, allow_nan=False)


def gaussians(dim):
    return st.builds(DiagGaussian, arrays(np.float64, dim, elements=coord),
                     arrays(np.float64, dim, elements=coord))


def test_kl_unit_shift_is_half():
    q = DiagGaussian(np.array([1.0]), np.array([0.0]))
    assert abs(kl_divergence(q, standard_prior(1)) - 0.5) < 1e-12


def test_kl_self_is_zero():
    q = DiagGaussian(np.array([0.3, -2.0]), np.array([1.5, -0.7]))
    assert kl_divergence(q, q) == 0.0


def test_log_prob_standard_normal_at_origin():
    assert log_prob(standard_prior(1), np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_entropy_unit():
    assert entropy(standard_prior(2)) == pytest.approx(math.log(2 * math.pi) + 1.0, abs=1e-15)


def test_reparam_is_deterministic():
    q = DiagGaussian(np.array([1.0, -1.0]), np.array([0.0, math.log(4.0)]))
    assert np.array_equal(sample_reparam(q, np.array([0.5, 0.5])), [1.5, 0.0])


def test_clamp_saturates_and_masks():
    lv, mask = clamp_log_var(np.array([-20.0, 0.0, 30.0]))
    assert np.array_equal(lv, [LOG_VAR_MIN, 0.0, LOG_VAR_MAX])
    assert np.array_equal(mask, [0.0, 1.0, 0.0])
    assert np.all(np.isfinite(DiagGaussian(np.zeros(2), np.array([-1e6, 1e6])).var))


def test_dimension_errors():
    with pytest.raises(ConfigurationError):
        DiagGaussian(np.zeros(2), np.zeros(3))
    with pytest.raises(ConfigurationError):
        kl_divergence(standard_prior(2), standard_prior(3))
    with pytest.raises(ConfigurationError):
        standard_prior(0)
    with pytest.raises(ConfigurationError):
        sample_reparam(standard_prior(2), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4).flatmap(lambda d: st.tuples(gaussians(d), gaussians(d))))
def test_kl_nonnegative_and_finite(pair):
    q, p = pair
    kl = kl_divergence(q, p)
    assert np.isfinite(kl) and kl >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4).flatmap(lambda d: st.tuples(gaussians(d), gaussians(d))))
def test_kl_equals_cross_entropy_minus_entropy(pair):
    q, p = pair
    # E_q[-log p] in closed form
    cross = np.sum(0.5 * (np.log(2 * np.pi) + p.log_var) + (q.var + (q.mean - p.mean) ** 2) / (2 * p.var))
    assert kl_divergence(q, p) == pytest.approx(cross - entropy(q), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(gaussians(3))
def test_kl_standard_matches_general(q):
    assert kl_standard(q.mean, q.log_var) == pytest.approx(kl_divergence(q, standard_prior(3)), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.tuples(gaussians(2), gaussians(2)))
def test_kl_backward_matches_differences(pair):
    q, p = pair
    grads = kl_backward(q, p)
    arrays_ = [q.mean, q.log_var, p.mean, p.log_var]
    h = 1e-6
    for k in range(4):
        for j in range(2):
            plus = [a.copy() for a in arrays_]
            minus = [a.copy() for a in arrays_]
            plus[k][j] += h
            minus[k][j] -= h
            f = lambda a: kl_divergence(DiagGaussian(a[0], a[1]), DiagGaussian(a[2], a[3]))
            num = (f(plus) - f(minus)) / (2 * h)
            assert abs(num - grads[k][j]) <= 1e-5 * (1 + abs(num))


def test_reparam_backward():
    q = DiagGaussian(np.array([0.2]), np.array([0.4]))
    eps = np.array([1.3])
    d_mean, d_lv = sample_reparam_backward(np.array([1.0]), q, eps)
    h = 1e-6
    num = (sample_reparam(DiagGaussian(q.mean, q.log_var + h), eps)
           - sample_reparam(DiagGaussian(q.mean, q.log_var - h), eps)) / (2 * h)
    assert d_mean[0] == 1.0
    assert d_lv[0] == pytest.approx(num[0], rel=1e-7)


def test_batched_reductions_run_over_last_axis():
    q = DiagGaussian(np.zeros((5, 3)), np.zeros((5, 3)))
    assert kl_divergence(q, q).shape == (5,)
    assert log_prob(q, np.zeros((5, 3))).shape == (5,)
    assert q[1:3].mean.shape == (2, 3)
