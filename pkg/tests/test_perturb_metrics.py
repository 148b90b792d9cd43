import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semforge import perturb_metrics as pm
from semforge.diffusion import make_corpus, make_toy_model
from semforge.numerics import SeededRng


@pytest.fixture(scope="module")
def images():
    return make_corpus(SeededRng(11), 4)[0]


@pytest.mark.parametrize("kind", pm.KINDS)
def test_perturbations_keep_shape_range_and_determinism(kind, images):
    p = pm.Perturbation.default(kind)
    a = pm.apply_perturbation(images, p, SeededRng(1))
    b = pm.apply_perturbation(images, p, SeededRng(1))
    assert a.shape == images.shape
    assert np.array_equal(a, b)
    assert a.min() >= -1 - 1e-12 and a.max() <= 1 + 1e-12
    assert not np.array_equal(a, images)


@pytest.mark.parametrize("kind,param", [("gaussian-noise", 0), ("salt-pepper", 0), ("brightness", 0),
                                        ("rotation", 0), ("crop-scale", 1.0), ("random-drop", 0)])
def test_identity_parameters(kind, param, images):
    out = pm.apply_perturbation(images, pm.Perturbation(kind, param), SeededRng(1))
    assert np.allclose(out, images, atol=1e-12)


def test_jpeg_quality_ordering(images):
    errs = [np.abs(pm.jpeg(images, q) - images).mean() for q in (10, 50, 95)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02


def test_jpeg_table_scaling():
    assert np.array_equal(pm.jpeg_quant_table(50), pm.JPEG_LUMA_TABLE)
    assert np.all(pm.jpeg_quant_table(100) == 1)
    assert np.all(pm.jpeg_quant_table(1) <= 255)


def test_salt_pepper_fraction(images):
    out = pm.apply_perturbation(images, pm.Perturbation("salt-pepper", 0.2), SeededRng(4))
    changed = np.mean(out != images)
    assert 0.15 < changed < 0.25


def test_rotation_90_is_exact():
    x = np.zeros((32, 32))
    x[10:14, 3:6] = 1
    assert np.allclose(pm.rotate(x, 90), np.rot90(x), atol=1e-9)


@pytest.mark.parametrize("kind,param", [("jpeg", 0), ("jpeg", 50.5), ("salt-pepper", 1.5), ("crop-scale", 0),
                                        ("brightness", 1.0), ("blur", 1)])
def test_bad_perturbations(kind, param):
    with pytest.raises(ValueError):
        pm.Perturbation(kind, param)


def test_psnr_and_ms_ssim(images):
    a = images[0]
    assert pm.psnr(a, a) == np.inf
    assert pm.ms_ssim(a, a) == pytest.approx(1.0)
    noisy = np.clip(a + 0.05 * SeededRng(2).normal(a.shape), -1, 1)
    assert 20 < pm.psnr(a, noisy) < 40
    assert pm.ms_ssim(a, noisy) == pytest.approx(pm.ms_ssim(noisy, a))
    assert pm.ms_ssim(a, noisy) < 1
    batch = pm.psnr(images, images[::-1])
    assert batch.shape == (4,)
    q = pm.quality(a, noisy)
    assert q.psnr == pytest.approx(pm.psnr(a, noisy))


def test_tpr_at_fpr():
    neg = np.arange(100) / 100
    assert pm.tpr_at_fpr([2.0, 0.5], neg, 0.01) == 0.5
    assert pm.tpr_at_fpr([-1.0, 0.5], neg, 0.01, "lower-is-positive") == 0.5
    assert pm.tpr_at_fpr([0.0], neg, 1.0) == 1.0
    with pytest.raises(ValueError):
        pm.tpr_at_fpr([], neg, 0.1)
    with pytest.raises(ValueError):
        pm.tpr_at_fpr([1.0], neg, 0.1, "sideways")


def test_similarity_matrix(images):
    models = [make_toy_model("A", 1), make_toy_model("A", 2), make_toy_model("B", 1), make_toy_model("C", 1)]
    s = pm.similarity_matrix(models, images)
    assert np.allclose(s, s.T, atol=1e-12)
    assert s[0, 1] == pytest.approx(1.0) and np.all(np.diag(s) == 1)
    assert s[0, 2] < 1 and s[0, 3] < 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(-1, 1), st.floats(0.001, 0.5))
def test_psnr_tracks_error(seed, shift, sigma):
    a = np.clip(SeededRng(seed).normal((32, 32)) * 0.3, -1, 1)
    b = a + sigma
    assert pm.psnr(a, b) == pytest.approx(10 * np.log10(4 / sigma**2))
