import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from semforge.numerics import (
    NumericalError,
    SeededRng,
    as_real_grid,
    binomial_tail_fpr,
    chisq_cdf,
    fft2_centered,
    ifft2_centered,
    noncentral_chisq_cdf,
    reg_incomplete_beta,
    reg_lower_gamma,
    sample_halfspace_gaussian,
)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(SeededRng(7).normal(50), SeededRng(7).normal(50))

    def test_derived_streams_differ(self):
        root = SeededRng(7)
        a, b = root.derive(1).normal(50), root.derive(2).normal(50)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, SeededRng(7, (1,)).normal(50))

    def test_position_advances(self):
        r = SeededRng(3)
        start = r.position
        r.normal(100)
        assert r.position > start

    def test_rejects_bad_seed(self):
        with pytest.raises(ValueError):
            SeededRng(-1)


class TestHalfspaceGaussian:
    def test_signs_follow_bits(self, rng):
        bits = rng.derive(1).bits(5000)
        x = sample_halfspace_gaussian(rng.derive(2), bits)
        assert np.all((x >= 0) == (bits == 1))
        assert np.all(x[bits == 0] < 0)

    def test_marginal_is_standard_normal(self, rng):
        x = sample_halfspace_gaussian(rng.derive(2), rng.derive(1).bits(20000))
        assert stats.kstest(x, "norm").pvalue > 1e-3

    def test_scalar_and_bad_bits(self, rng):
        assert sample_halfspace_gaussian(rng, 0) < 0
        with pytest.raises(ValueError):
            sample_halfspace_gaussian(rng, [0, 2])


class TestCenteredFft:
    def test_roundtrip(self, rng):
        g = rng.normal((3, 8, 8))
        spec = fft2_centered(g, 1)
        back, residue = ifft2_centered(spec)
        assert np.allclose(back, g[1], atol=1e-12)
        assert residue < 1e-12

    def test_dc_at_center(self):
        g = np.ones((1, 8, 8))
        spec = fft2_centered(g, 0)
        assert spec[4, 4] == pytest.approx(64)
        assert np.sum(np.abs(spec)) == pytest.approx(64)

    def test_errors(self):
        with pytest.raises(ValueError):
            fft2_centered(np.zeros((8, 8)), 0)
        with pytest.raises(IndexError):
            fft2_centered(np.zeros((2, 8, 8)), 2)
        with pytest.raises(ValueError):
            as_real_grid(np.array([np.nan]))


class TestSpecialFunctions:
    @pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2, 3, 0.1), (50, 60, 0.45), (166, 91, 0.5), (1e3, 1e3, 0.51)])
    def test_incomplete_beta_vs_scipy(self, a, b, x):
        assert reg_incomplete_beta(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10, abs=1e-300)

    @pytest.mark.parametrize("k", [1, 5, 13, 20])
    def test_incomplete_beta_vs_binomial_sums(self, k):
        for j in range(1, k + 1):
            brute = sum(math.comb(k, i) for i in range(j, k + 1)) / 2**k
            assert abs(reg_incomplete_beta(j, k - j + 1, 0.5) - brute) < 1e-12

    @pytest.mark.parametrize("a,x", [(0.5, 0.2), (3, 2.5), (20, 30), (100, 90), (7.5, 40)])
    def test_lower_gamma_vs_scipy(self, a, x):
        assert reg_lower_gamma(a, x) == pytest.approx(special.gammainc(a, x), rel=1e-10, abs=1e-300)

    def test_chisq(self):
        assert chisq_cdf(4, 0) == 0.0
        assert chisq_cdf(36, 30.0) == pytest.approx(stats.chi2.cdf(30.0, 36), rel=1e-10)

    def test_binomial_tail(self):
        assert binomial_tail_fpr(256, 0.0) == 1.0
        assert binomial_tail_fpr(256, 1.01) == 0.0
        assert binomial_tail_fpr(256, 166 / 256) == pytest.approx(stats.binom.sf(165, 256, 0.5), rel=1e-10)

    @pytest.mark.parametrize("df,lam,x", [(2, 0.5, 1.0), (36, 81, 40), (36, 81, 200), (10, 500, 400), (4, 3719, 3600)])
    def test_noncentral_vs_scipy(self, df, lam, x):
        assert noncentral_chisq_cdf(df, lam, x) == pytest.approx(stats.ncx2.cdf(x, df, lam), rel=1e-9, abs=1e-14)

    def test_noncentral_edges(self):
        assert noncentral_chisq_cdf(4, 2.0, 0.0) == 0.0
        assert noncentral_chisq_cdf(4, 0.0, 3.0) == pytest.approx(chisq_cdf(4, 3.0))
        assert noncentral_chisq_cdf(1, 5e-324, 1.0) == pytest.approx(chisq_cdf(1, 1.0))
        with pytest.raises(ValueError):
            noncentral_chisq_cdf(0, 1.0, 1.0)
        with pytest.raises(ValueError):
            reg_incomplete_beta(1, 1, 1.5)
        assert issubclass(NumericalError, ArithmeticError)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 200), st.floats(0.1, 200), st.floats(1e-6, 1 - 1e-6))
def test_beta_reflection(a, b, x):
    assert reg_incomplete_beta(a, b, x) == pytest.approx(1 - reg_incomplete_beta(b, a, 1 - x), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.floats(0.0, 300), st.floats(0.01, 400), st.floats(0.01, 400))
def test_noncentral_monotone_and_bounded(df, lam, x1, x2):
    lo, hi = sorted((x1, x2))
    a, b = noncentral_chisq_cdf(df, lam, lo), noncentral_chisq_cdf(df, lam, hi)
    assert 0.0 <= a <= b + 1e-12 <= 1.0 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 4))
def test_fft_roundtrip_property(seed, channels):
    g = SeededRng(seed).normal((channels, 8, 8))
    back, residue = ifft2_centered(fft2_centered(g, channels - 1))
    assert np.allclose(back, g[-1], atol=1e-10) and residue < 1e-10
