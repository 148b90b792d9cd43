import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from semforge import watermark_tr as tr
from semforge.numerics import SeededRng, fft2_centered


@pytest.fixture
def key():
    return tr.tr_make_key(SeededRng(5))


def test_default_key_geometry(key):
    assert key.radii == (1, 2, 3)
    assert key.df == int(key.mask.sum()) == 36
    assert tr.noncentrality(key, tr.null_sigma2(key)) == pytest.approx(81.0)


def test_pattern_is_hermitian(key):
    pat = key.pattern
    mirror = np.roll(np.conj(pat[::-1, ::-1]), (1, 1), axis=(0, 1))
    assert np.allclose(pat, mirror)
    assert np.all(pat[~key.mask] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 3), st.integers(0, 3))
def test_embed_writes_pattern_and_stays_real(seed, rings, channel):
    rng = SeededRng(seed)
    k = tr.tr_make_key(rng, rings, 3.0, channel)
    z = rng.derive(1).normal((4, 8, 8))
    zw = tr.tr_embed(z, k)
    assert zw.dtype == np.float64
    spec = fft2_centered(zw, channel)
    assert np.allclose(spec[k.mask], k.pattern[k.mask], atol=1e-9)
    others = [c for c in range(4) if c != channel]
    assert np.array_equal(zw[others], z[others])
    assert tr.tr_verify(zw, k).p_value < 1e-6


def test_clean_pvalues_are_uniform(key, rng):
    p = [tr.tr_verify(rng.derive(i).normal((4, 8, 8)), key).p_value for i in range(400)]
    assert stats.kstest(p, "uniform").pvalue > 1e-3


def test_text_roundtrip(key):
    assert tr.TrKey.from_text(key.to_text()) == key


def test_key_validation():
    with pytest.raises(ValueError):
        tr.TrKey(0, (4,), (1.0,), 8)
    with pytest.raises(ValueError):
        tr.TrKey(0, (1, 1), (1.0, 2.0), 8)
    with pytest.raises(IndexError):
        tr.tr_make_key(SeededRng(0), channel=4)
    with pytest.raises(ValueError):
        tr.tr_make_key(SeededRng(0), max_radius=4.0)


def test_zero_ring_key():
    k = tr.tr_make_key(SeededRng(0), 0)
    assert tr.tr_verify(np.ones((4, 8, 8)) + SeededRng(1).normal((4, 8, 8)), k).p_value == 0.0


def test_empirical_threshold():
    p = np.linspace(0.001, 1, 1000)
    assert tr.empirical_threshold(p, 0.01) == pytest.approx(0.01)
    with pytest.warns(tr.CalibrationWarning):
        tr.empirical_threshold(p[:100], 0.01)
    with pytest.raises(ValueError):
        tr.empirical_threshold([], 0.01)


def test_calibration(model_a1, key):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", tr.CalibrationWarning)
        cal = tr.tr_calibrate_threshold(model_a1, key, 200, 0.05, SeededRng(3))
    assert np.mean(cal.clean_pvalues <= cal.threshold) <= 0.05
    assert cal.tpr == 1.0
    with pytest.raises(ValueError):
        tr.tr_calibrate_threshold(model_a1, key, 50, 0.05)
    with pytest.raises(ValueError):
        tr.tr_calibrate_threshold(model_a1, tr.tr_make_key(SeededRng(0), 0), 200, 0.05)


def test_pvalue_validation(key):
    with pytest.raises(ValueError):
        tr.tr_pvalue(-1.0, key)
    with pytest.raises(ValueError):
        tr.tr_embed(np.zeros((4, 4, 4)), key)
