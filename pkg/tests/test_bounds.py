import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steel.bounds import (GaussianPosterior, PacBayesOptConfig, bounded_ordinal_loss, fit_codec,
                          finite_hypothesis_certificate, finite_hypothesis_complexity,
                          gaussian_kl, per_example_losses, quantization_certificate,
                          quantization_complexity, vanilla_pacbayes_certificate, zero_one_loss)
from steel.errors import InvalidArgument

mpmath.mp.dps = 50


def mp_finite(M, n, eps, C=1):
    return C * mpmath.sqrt(mpmath.log(mpmath.mpf(M) / mpmath.mpf(eps)) / (2 * n))


def mp_quant(K, n, eps, C=1):
    K = mpmath.mpf(K)
    return C * mpmath.sqrt((K + 2 * mpmath.log(K) + mpmath.log(1 / mpmath.mpf(eps))) / (2 * n))


def test_finite_hypothesis_reference_values():
    c = finite_hypothesis_certificate(0.0, 20000, 80, 0.05, 1.0)
    assert c.complexity == pytest.approx(float(mp_finite(20000, 80, "0.05")), abs=1e-12)
    assert c.complexity == pytest.approx(0.2839, abs=5e-5)
    c2 = finite_hypothesis_certificate(0.1, 10000, 256, 0.05)
    assert c2.complexity == pytest.approx(float(mp_finite(10000, 256, "0.05")), abs=1e-12)
    assert c2.complexity == pytest.approx(0.1544, abs=5e-5)
    assert c2.bound == c2.r + c2.complexity


def test_finite_hypothesis_single_hypothesis_limit():
    c = finite_hypothesis_certificate(0.3, 1, 50, 1 - 1e-12)
    assert c.complexity < 1e-6
    assert c.bound == pytest.approx(0.3, abs=1e-6)


def test_finite_hypothesis_errors():
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(InvalidArgument):
            finite_hypothesis_certificate(0.1, 10, 10, eps)
    with pytest.raises(InvalidArgument):
        finite_hypothesis_certificate(1.5, 10, 10, 0.05)
    with pytest.raises(InvalidArgument):
        finite_hypothesis_certificate(0.1, 0, 10, 0.05)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 10**7), st.integers(1, 10**4), st.floats(1e-6, 0.99))
def test_finite_hypothesis_monotone(M, n, eps):
    base = finite_hypothesis_complexity(M, n, eps)
    assert finite_hypothesis_complexity(M + 1, n, eps) > base
    assert finite_hypothesis_complexity(M, n + 1, eps) < base
    assert finite_hypothesis_complexity(M, n, eps * 1.01) < base


def test_quantization_best_case_reference():
    c = quantization_certificate(0.0, 1024, 80, 0.05)
    assert c.complexity == pytest.approx(float(mp_quant(1024, 80, "0.05")), abs=1e-12)
    assert c.complexity == pytest.approx(2.5506, abs=5e-5)
    c2 = quantization_certificate(0.0, 2592, 256, 0.05)
    assert c2.complexity == pytest.approx(float(mp_quant(2592, 256, "0.05")), abs=1e-12)
    assert c2.complexity == pytest.approx(2.258, abs=5e-4)


def test_quantization_large_n_limit():
    assert quantization_certificate(0.0, 1024, 10**12, 0.05).complexity < 1e-3
    with pytest.raises(InvalidArgument):
        quantization_certificate(0.0, 0.5, 10, 0.05)


def test_code_length_single_symbol():
    theta = np.full(300, 0.7)
    assert quantization_complexity(theta, levels=1, margin_bits=0) == 32
    assert quantization_complexity(theta, levels=1) == 34  # default 2-bit coder margin


def test_code_length_two_even_symbols():
    theta = np.repeat([-1.0, 1.0], 512)
    # oracle: -log2(1/2) = 1 bit per entry, plus two 32-bit codebook entries
    expected = 1024 * 1 + 2 * 32
    assert quantization_complexity(theta, levels=2, margin_bits=0) == expected
    assert quantization_complexity(theta, levels=2, include_codebook=False, margin_bits=0) == 1024


def test_code_length_entropy_oracle(rng):
    theta = rng.choice([-0.5, 0.0, 0.25, 3.0], size=777, p=[0.1, 0.6, 0.2, 0.1])
    counts = np.unique(theta, return_counts=True)[1]
    p = counts / counts.sum()
    ideal = -(counts * np.log2(p)).sum()
    assert quantization_complexity(theta, levels=4, margin_bits=0) == math.ceil(ideal) + 4 * 32


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 400), st.integers(1, 16))
def test_code_length_permutation_invariant_and_capped(seed, d, L):
    r = np.random.default_rng(seed)
    theta = r.standard_normal(d)
    K = quantization_complexity(theta, levels=L)
    assert K == quantization_complexity(r.permutation(theta), levels=L)
    assert 1 <= K <= 32 * d + 32 * L


def test_codec_counts_sum_to_d(rng):
    codec = fit_codec(rng.standard_normal(500), levels=8)
    assert codec.counts.sum() == 500 and codec.levels <= 8


def test_gaussian_kl_cases():
    assert gaussian_kl(GaussianPosterior(np.zeros(3), np.full(3, 2.0), 2.0)) == pytest.approx(0.0)
    assert gaussian_kl(GaussianPosterior(np.array([1.0, 0.0]), np.ones(2), 1.0)) == pytest.approx(0.5)
    with pytest.raises(InvalidArgument):
        gaussian_kl(GaussianPosterior(np.zeros(2), np.array([1.0, 0.0]), 1.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_gaussian_kl_nonnegative_and_min_at_kappa(seed):
    r = np.random.default_rng(seed)
    d = int(r.integers(1, 20))
    kappa = float(r.uniform(0.1, 3))
    post = GaussianPosterior(r.standard_normal(d), r.uniform(0.01, 3, d), kappa)
    assert gaussian_kl(post) >= 0
    at_kappa = gaussian_kl(GaussianPosterior(np.zeros(d), np.full(d, kappa), kappa))
    assert gaussian_kl(GaussianPosterior(np.zeros(d), post.sigma, kappa)) >= at_kappa - 1e-12


def test_vanilla_complexity_reference():
    # KL = 0 posterior (mu = 0, sigma = kappa) and no optimization
    x = np.eye(3)
    y = np.array([0, 1, 2])
    post = GaussianPosterior(np.zeros(12), np.ones(12), 1.0)
    cert, _ = vanilla_pacbayes_certificate(post, np.tile(x, (27, 1))[:80], np.tile(y, 27)[:80], 3,
                                           0.05, optimize=False)
    assert cert.KL == pytest.approx(0.0)
    assert cert.complexity == pytest.approx(float(mpmath.sqrt(mpmath.log(20) / 160)), abs=1e-12)
    assert cert.complexity == pytest.approx(0.1368, abs=5e-5)


def test_vanilla_point_mass_limit():
    x = np.array([[1.0, 0.0], [0.0, 1.0]] * 10)
    y = np.array([0, 1] * 10)
    mu = np.array([5.0, 0.0, 0.0, 5.0, 0.0, 0.0])  # perfect separator
    post = GaussianPosterior(mu, np.full(6, 1e-6), 1.0)
    cert, _ = vanilla_pacbayes_certificate(post, x, y, 2, optimize=False)
    assert cert.r == 0.0
    assert cert.bound == pytest.approx(cert.complexity)


def test_vanilla_optimization_reduces_bound(rng):
    x = rng.standard_normal((60, 4))
    y = (x[:, 0] > 0).astype(int)
    mu = np.zeros(10)
    mu[0], mu[4] = -3.0, 3.0
    post = GaussianPosterior(mu, np.full(10, 0.01), 1.0)
    cfg = PacBayesOptConfig(steps=300, seed=1)
    before, _ = vanilla_pacbayes_certificate(post, x, y, 2, config=cfg, optimize=False)
    after, new_post = vanilla_pacbayes_certificate(post, x, y, 2, config=cfg)
    assert after.bound < before.bound
    assert np.all(new_post.sigma > 0)
    assert after.extra["sigma_param"] == "log"


def test_zero_one_loss():
    assert zero_one_loss(2, 2) == 0.0
    assert zero_one_loss(1, 2) == 1.0
    batch = zero_one_loss(np.array([0, 1, 2, 3]), np.array([0, 1, 0, 0]))
    assert 0.0 <= batch.mean() <= 1.0 and batch.mean() == 0.5


def test_bounded_ordinal_loss_examples():
    assert bounded_ordinal_loss([0, 1, 0], [0, 1, 0]) == 0.0
    assert bounded_ordinal_loss([1, 0], [0, 1]) == 1.0
    assert bounded_ordinal_loss([1, 0, 0], [0.5, 0.25, 0.25]) == pytest.approx(0.5)
    with pytest.raises(InvalidArgument):
        bounded_ordinal_loss([1, 0], [0.7, 0.7])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_registered_losses_are_bounded(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(2, 7))
    f = int(r.integers(1, 5))
    theta = r.standard_normal((3, k * f + k)) * r.uniform(0.01, 100)
    x = r.standard_normal((9, f))
    y = r.integers(0, k, 9)
    for loss in ("zero_one", "ordinal"):
        v = per_example_losses(theta, x, y, k, loss)
        assert np.all(v >= 0) and np.all(v <= 1.0 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(1, 10**6), st.integers(1, 10**4), st.floats(1e-4, 0.5))
def test_certificate_identity(r, M, n, eps):
    for c in (finite_hypothesis_certificate(r, M, n, eps), quantization_certificate(r, M, n, eps)):
        assert c.bound == c.r + c.complexity
        assert c.complexity >= 0
        d = c.to_dict()
        assert d["bound"] == c.bound
