import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from layerscene.autodiff import Tensor, check_gradients
from layerscene.autodiff.tensor import ShapeError
from layerscene.stochastic import (DiagGaussian, PositionDistribution, aggregated_position_l1,
                                   alpha_entropy_regularizer, categorical_cross_entropy,
                                   gaussian_log_likelihood, gaussian_nll, gumbel_noise,
                                   gumbel_temperature, hard_position, kl_gaussian,
                                   kl_gaussian_std, sample_gaussian, sample_position,
                                   sigma_schedule, spatial_softmax)


def gauss(mean, log_var):
    return DiagGaussian(Tensor(np.asarray(mean, np.float64), requires_grad=True),
                        Tensor(np.asarray(log_var, np.float64), requires_grad=True))


# ---------------------------------------------------------------- Gaussian
def test_gaussian_shape_mismatch():
    with pytest.raises(ShapeError):
        gauss([0.0, 0.0], [0.0])
    with pytest.raises(ShapeError):
        sample_gaussian(gauss([0.0, 0.0], [0.0, 0.0]), np.zeros(3))


def test_sample_with_zero_noise_is_mean_and_standard_passes_noise():
    d = gauss([1.5, -2.0], [0.0, 0.0])
    assert np.array_equal(sample_gaussian(d, np.zeros(2)).data, [1.5, -2.0])
    z = np.array([0.3, -0.7])
    assert np.array_equal(sample_gaussian(gauss([0, 0], [0, 0]), z).data, z)


def test_sample_moments_monte_carlo(f64):
    rng = np.random.default_rng(0)
    n = 100_000
    mu, lv = np.array([0.5, -1.0, 2.0]), np.array([0.0, -1.0, 0.7])
    d = gauss(np.broadcast_to(mu, (n, 3)), np.broadcast_to(lv, (n, 3)))
    s = sample_gaussian(d, rng.standard_normal((n, 3))).data
    var = np.exp(lv)
    assert np.all(np.abs(s.mean(0) - mu) < 3 * np.sqrt(var / n))
    # variance of the sample variance is 2 var^2 / (n - 1) for a normal
    assert np.all(np.abs(s.var(0, ddof=1) - var) < 3 * np.sqrt(2 * var ** 2 / (n - 1)))


def test_sample_gradients(f64, rng):
    d = gauss(rng.normal(size=4), rng.normal(size=4))
    eps = rng.normal(size=4)
    w = rng.normal(size=4)
    assert check_gradients(lambda: (sample_gaussian(d, eps) * w).sum(), [d.mean, d.log_var]) < 1e-6


def test_kl_closed_form_examples():
    assert kl_gaussian_std(gauss([0.0], [0.0])).item() == 0.0
    assert kl_gaussian_std(gauss([1.0], [0.0])).item() == 0.5


def test_kl_matches_monte_carlo(f64):
    rng = np.random.default_rng(42)
    mu, lv = rng.normal(size=4), rng.uniform(-1, 1, size=4)
    exact = kl_gaussian_std(gauss(mu, lv)).item()
    x = mu + np.exp(lv / 2) * rng.standard_normal((1_000_000, 4))
    log_q = stats.norm.logpdf(x, mu, np.exp(lv / 2)).sum(1)
    log_p = stats.norm.logpdf(x).sum(1)
    assert abs((log_q - log_p).mean() - exact) / exact < 0.01


@given(arrays(np.float64, 5, elements=st.floats(-3, 3)), arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_kl_is_nonnegative(mu, lv):
    assert kl_gaussian_std(gauss(mu, lv)).item() >= -1e-12


@given(arrays(np.float64, 3, elements=st.floats(-1e-7, 1e-7)))
def test_kl_vanishes_only_at_standard_normal(tiny):
    assert kl_gaussian_std(gauss(np.zeros(3), np.zeros(3))).item() < 1e-12
    if np.any(np.abs(tiny) > 1e-9):
        assert kl_gaussian_std(gauss(tiny * 1e6, np.zeros(3))).item() > 0


def test_general_kl_reduces_to_standard_and_is_zero_on_self(rng):
    q = gauss(rng.normal(size=(2, 5)), rng.normal(size=(2, 5)))
    std = DiagGaussian.standard((2, 5), np.float64)
    assert np.allclose(kl_gaussian(q, std).data, kl_gaussian_std(q).data, atol=1e-12)
    assert np.allclose(kl_gaussian(q, q).data, 0, atol=1e-12)
    with pytest.raises(ShapeError):
        kl_gaussian(q, DiagGaussian.standard((2, 4), np.float64))


def test_general_kl_matches_monte_carlo(f64):
    rng = np.random.default_rng(3)
    q = gauss(rng.normal(size=3), rng.uniform(-1, 1, 3))
    p = gauss(rng.normal(size=3), rng.uniform(-1, 1, 3))
    exact = kl_gaussian(q, p).item()
    sq, sp = np.exp(q.log_var.data / 2), np.exp(p.log_var.data / 2)
    x = q.mean.data + sq * rng.standard_normal((1_000_000, 3))
    mc = (stats.norm.logpdf(x, q.mean.data, sq) - stats.norm.logpdf(x, p.mean.data, sp)).sum(1).mean()
    assert abs(mc - exact) / exact < 0.01


def test_gaussian_nll_matches_scipy(rng):
    d = gauss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    x = rng.normal(size=(3, 4))
    ref = -stats.norm.logpdf(x, d.mean.data, np.exp(d.log_var.data / 2)).sum(-1)
    assert np.allclose(gaussian_nll(Tensor(x), d).data, ref, atol=1e-10)


def test_kl_gradients(f64, rng):
    q = gauss(rng.normal(size=5), rng.normal(size=5))
    p = gauss(rng.normal(size=5), rng.normal(size=5))
    assert check_gradients(lambda: kl_gaussian(q, p), [q.mean, q.log_var, p.mean, p.log_var]) < 1e-5


# ---------------------------------------------------------------- positions
def test_temperature_must_be_positive():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            PositionDistribution(Tensor(np.zeros((3, 3))), t)


def test_uniform_logits_zero_noise_give_uniform_map():
    p = PositionDistribution(Tensor(np.zeros((4, 4))), 0.3)
    assert np.allclose(sample_position(p, np.zeros((4, 4))).data, 1 / 16)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_position_samples_are_distributions(seed, temp):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(scale=3, size=(2, 5, 5)))
    w = sample_position(PositionDistribution(logits, temp), gumbel_noise(rng, (2, 5, 5), np.float64)).data
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=(-2, -1)), 1, atol=1e-5)


def test_gumbel_argmax_matches_categorical():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 3))
    p = PositionDistribution(Tensor(logits), 0.3)
    n = 10_000
    noise = gumbel_noise(rng, (n, 3, 3), np.float64)
    w = sample_position(PositionDistribution(Tensor(np.broadcast_to(logits, (n, 3, 3)).copy()), 0.3),
                        noise).data
    counts = np.bincount(w.reshape(n, -1).argmax(1), minlength=9)
    expected = p.probs().data.ravel() * n
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_gumbel_noise_is_finite_and_seeded():
    a = gumbel_noise(np.random.default_rng(1), (1000,))
    b = gumbel_noise(np.random.default_rng(1), (1000,))
    assert np.array_equal(a, b) and np.all(np.isfinite(a)) and a.dtype == np.float32


def test_hard_position_is_one_hot_at_argmax():
    w = np.array([[[0.1, 0.5], [0.3, 0.1]]])
    assert np.array_equal(hard_position(w), [[[0, 1], [0, 0]]])


def test_spatial_softmax_sums_over_both_axes(rng):
    s = spatial_softmax(Tensor(rng.normal(size=(2, 3, 4, 4)))).data
    assert np.allclose(s.sum(axis=(-2, -1)), 1)


def test_cross_entropy_against_log_softmax(rng):
    logits = rng.normal(size=(2, 3, 3))
    target = np.array([4, 7])
    flat = logits.reshape(2, 9)
    ref = -(flat[[0, 1], target] - np.log(np.exp(flat).sum(1))).sum()
    assert categorical_cross_entropy(Tensor(logits), target).item() == pytest.approx(ref, abs=1e-10)


# ---------------------------------------------------------------- schedules
def test_gumbel_temperature_schedule():
    assert gumbel_temperature(0) == 0.3
    assert gumbel_temperature(10000) == pytest.approx(0.6)
    temps = [gumbel_temperature(e) for e in range(501)]
    assert all(b > a for a, b in zip(temps, temps[1:]))
    with pytest.raises(ValueError):
        gumbel_temperature(-1)


def test_sigma_schedule():
    assert sigma_schedule(100) == 0.01 / math.sqrt(3)
    assert sigma_schedule(200) == 0.01 / math.sqrt(5)
    assert sigma_schedule(149) == 0.01 / math.sqrt(3)
    assert sigma_schedule(150) == 0.01 / math.sqrt(5)


# --------------------------------------------------------------- L1 term
def test_l1_uniform_and_one_hot():
    N = 6
    assert aggregated_position_l1(Tensor(np.full((3, N, N), 1 / N**2))).item() == pytest.approx(0, abs=1e-12)
    spike = np.zeros((N, N))
    spike[2, 3] = 1
    assert aggregated_position_l1([Tensor(spike)]).item() == pytest.approx(2 * (1 - 1 / N**2), abs=1e-12)


def naive_l1(maps):
    """Per-pixel loop over the averaged map."""
    k, N, _ = maps.shape
    total = 0.0
    for r in range(N):
        for c in range(N):
            avg = sum(maps[i, r, c] for i in range(k)) / k
            total += abs(avg - 1 / (N * N))
    return total


def test_l1_matches_naive_summation(f64, rng):
    maps = rng.dirichlet(np.ones(25), size=7).reshape(7, 5, 5)
    assert abs(aggregated_position_l1(Tensor(maps)).item() - naive_l1(maps)) < 1e-10


@given(st.integers(0, 2**31 - 1))
def test_l1_permutation_invariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    maps = rng.dirichlet(np.full(16, 0.3), size=5).reshape(5, 4, 4)
    a = aggregated_position_l1(Tensor(maps)).item()
    b = aggregated_position_l1(Tensor(maps[rng.permutation(5)])).item()
    assert abs(a - b) < 1e-12 and 0 <= a < 2


def test_l1_rejects_unnormalized_maps():
    with pytest.raises(ValueError):
        aggregated_position_l1(Tensor(np.ones((1, 3, 3))))


# ------------------------------------------------------------ likelihoods
def test_log_likelihood_zero_residual_and_direct_formula(f64, rng):
    x = rng.uniform(size=(3, 4, 4))
    sigma = 0.01 / math.sqrt(3)
    P = x.size
    assert gaussian_log_likelihood(x, Tensor(x), sigma).item() == pytest.approx(
        -(P / 2) * math.log(2 * math.pi * sigma ** 2), rel=1e-12)
    mu = x + rng.normal(scale=0.02, size=x.shape)
    direct = sum(-0.5 * math.log(2 * math.pi * sigma ** 2) - (a - b) ** 2 / (2 * sigma ** 2)
                 for a, b in zip(x.ravel(), mu.ravel()))
    ours = gaussian_log_likelihood(x, Tensor(mu), sigma).item()
    assert abs(ours - direct) / abs(direct) < 1e-10


def test_log_likelihood_errors():
    with pytest.raises(ValueError):
        gaussian_log_likelihood(np.zeros(3), Tensor(np.zeros(3)), 0.0)
    with pytest.raises(ShapeError):
        gaussian_log_likelihood(np.zeros(3), Tensor(np.zeros(4)), 1.0)


def test_alpha_regularizer_closed_forms():
    P = 20
    assert alpha_entropy_regularizer(Tensor(np.zeros(P))).item() == 0
    assert alpha_entropy_regularizer(Tensor(np.ones(P))).item() == 0
    assert alpha_entropy_regularizer(Tensor(np.full(P, 0.5, np.float64))).item() == pytest.approx(
        P * 0.5 * math.log(0.5))


@given(arrays(np.float64, 8, elements=st.floats(0, 1)))
def test_alpha_regularizer_is_nonpositive(a):
    assert alpha_entropy_regularizer(Tensor(a)).item() <= 0
