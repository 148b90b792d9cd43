"""Image perturbations, image-quality metrics, detection rates, and autoencoder similarity.

Images are float arrays in the pixel range [-1, 1] with shape (..., H, W).
Perturbation magnitudes that the literature states for [0, 1] images
(noise sigma, brightness factors) are applied in that normalization.

Quality reports use PSNR and MS-SSIM; MS-SSIM stands in for LPIPS, which
needs a pretrained network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy import ndimage

from .numerics import SeededRng

PIXEL_MIN, PIXEL_MAX = -1.0, 1.0
PIXEL_RANGE = PIXEL_MAX - PIXEL_MIN
QUALITY_NOTE = "image quality: PSNR and MS-SSIM (MS-SSIM replaces LPIPS)"

KINDS = ("jpeg", "gaussian-noise", "salt-pepper", "brightness", "rotation", "crop-scale", "random-drop")
DEFAULT_PERTURBATIONS = {
    "jpeg": 82,
    "gaussian-noise": 0.1,
    "salt-pepper": 0.05,
    "brightness": 0.2,
    "rotation": 3.0,
    "crop-scale": 0.9,
    "random-drop": 0.1,
}

# standard JPEG luminance quantization table (quality 50)
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class Perturbation:
    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        p = float(self.param)
        ok = {
            "jpeg": 1 <= p <= 100 and p == int(p),
            "gaussian-noise": p >= 0,
            "salt-pepper": 0 <= p <= 1,
            "brightness": 0 <= p < 1,
            "rotation": math.isfinite(p),
            "crop-scale": 0 < p <= 1,
            "random-drop": 0 <= p <= 1,
        }[self.kind]
        if not ok:
            raise ValueError(f"parameter {self.param} out of range for {self.kind}")

    @classmethod
    def default(cls, kind: str) -> "Perturbation":
        return cls(kind, DEFAULT_PERTURBATIONS[kind])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param}

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.param:g}"


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ms_ssim: float


def _clamp(x):
    return np.clip(x, PIXEL_MIN, PIXEL_MAX)


def jpeg_quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the IJG quality rule."""
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50) / 100), 1, 255)


def jpeg(image, quality: int) -> np.ndarray:
    """Single-channel baseline JPEG round trip without entropy coding.

    Pixels go to 0..255, are level-shifted by 128, transformed per 8x8
    block with the orthonormal DCT-II, quantized with the scaled luminance
    table, dequantized, inverse-transformed, rounded and clipped.
    """
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError("jpeg needs image sides divisible by 8")
    q = jpeg_quant_table(int(quality))
    lead = x.shape[:-2]
    pix = np.round((x - PIXEL_MIN) / PIXEL_RANGE * 255.0) - 128.0
    blocks = pix.reshape(*lead, h // 8, 8, w // 8, 8)
    blocks = np.moveaxis(blocks, -3, -2)
    coef = sfft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.round(coef / q) * q
    rec = sfft.idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    rec = np.moveaxis(rec, -2, -3).reshape(*lead, h, w)
    rec = np.clip(np.round(rec + 128.0), 0, 255)
    return rec / 255.0 * PIXEL_RANGE + PIXEL_MIN


def _resample(image, rows, cols):
    # bilinear with edge clamping
    return ndimage.map_coordinates(image, [rows, cols], order=1, mode="nearest")


def _per_image(fn, x):
    lead = x.shape[:-2]
    flat = x.reshape(-1, *x.shape[-2:])
    return np.stack([fn(im) for im in flat]).reshape(*lead, *x.shape[-2:])


def rotate(image, degrees: float) -> np.ndarray:
    """Rotate counterclockwise about the image center, bilinear, edges clamped."""
    x = np.asarray(image, dtype=np.float64)
    if degrees == 0:
        return x.copy()
    return _per_image(lambda im: ndimage.rotate(im, degrees, reshape=False, order=1, mode="nearest"), x)


def crop_scale(image, fraction: float) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if fraction == 1:
        return x.copy()
    h, w = x.shape[-2:]
    ch, cw = h * fraction, w * fraction
    r0, c0 = (h - ch) / 2, (w - cw) / 2
    # pixel centers of the output grid mapped into the central crop
    rows = r0 + (np.arange(h) + 0.5) * ch / h - 0.5
    cols = c0 + (np.arange(w) + 0.5) * cw / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _per_image(lambda im: _resample(im, rr, cc), x)


def apply_perturbation(image, p: Perturbation, rng: SeededRng) -> np.ndarray:
    """Apply ``p`` to one image or a batch; randomness comes from ``rng`` only."""
    x = np.asarray(image, dtype=np.float64)
    k, v = p.kind, float(p.param)
    if k == "jpeg":
        return jpeg(x, int(v))
    if k == "gaussian-noise":
        if v == 0:
            return x.copy()
        return _clamp(x + v * PIXEL_RANGE * rng.normal(x.shape))
    if k == "salt-pepper":
        hit = rng.uniform(x.shape) < v
        salt = rng.uniform(x.shape) < 0.5
        return np.where(hit, np.where(salt, PIXEL_MAX, PIXEL_MIN), x)
    if k == "brightness":
        if v == 0:
            return x.copy()
        lead = x.shape[:-2]
        factor = 1.0 + v * (2.0 * rng.uniform(lead) - 1.0)
        factor = np.asarray(factor)[(...,) + (None, None)]
        unit = (x - PIXEL_MIN) / PIXEL_RANGE
        return _clamp(unit * factor * PIXEL_RANGE + PIXEL_MIN)
    if k == "rotation":
        return rotate(x, v)
    if k == "crop-scale":
        return crop_scale(x, v)
    if k == "random-drop":
        drop = rng.uniform(x.shape) < v
        return np.where(drop, 0.5 * (PIXEL_MIN + PIXEL_MAX), x)
    raise ValueError(k)


# --------------------------------------------------------------------------
# Quality metrics
# --------------------------------------------------------------------------


def psnr(a, b, data_range: float = PIXEL_RANGE):
    """Peak signal-to-noise ratio in dB over the last two axes; +inf on equality."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(data_range**2 / mse)
    return float(out) if np.ndim(out) == 0 else out


MS_SSIM_SCALES = 3
MS_SSIM_WINDOW = 7
MS_SSIM_SIGMA = 1.5
_MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


def _gauss_window(size=MS_SSIM_WINDOW, sigma=MS_SSIM_SIGMA):
    g = np.exp(-0.5 * ((np.arange(size) - (size - 1) / 2) / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x, g):
    # separable valid-mode Gaussian filtering over the last two axes
    x = sliding_window_view(x, g.size, axis=-1) @ g
    x = np.swapaxes(sliding_window_view(np.swapaxes(x, -1, -2), g.size, axis=-1) @ g, -1, -2)
    return x


def _ssim_parts(a, b, data_range):
    g = _gauss_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return lum.mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def _pool2(x):
    h, w = x.shape[-2:]
    x = x[..., : h // 2 * 2, : w // 2 * 2]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a, b, data_range: float = PIXEL_RANGE, scales: int = MS_SSIM_SCALES):
    """Multi-scale SSIM with 2x average pooling between scales.

    Uses a 7-tap Gaussian window (sigma 1.5) and the first ``scales``
    standard exponents, renormalized to sum to one. Negative contrast
    terms are clipped at zero.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    min_side = MS_SSIM_WINDOW * 2 ** (scales - 1)
    if min(a.shape[-2:]) < min_side:
        raise ValueError(f"ms_ssim needs images of at least {min_side}x{min_side}")
    w = _MS_SSIM_WEIGHTS[:scales] / _MS_SSIM_WEIGHTS[:scales].sum()
    out = 1.0
    for s in range(scales):
        lum, cs = _ssim_parts(a, b, data_range)
        if s == scales - 1:
            out = out * np.maximum(lum * cs, 0.0) ** w[s]
        else:
            out = out * np.maximum(cs, 0.0) ** w[s]
            a, b = _pool2(a), _pool2(b)
    return float(out) if np.ndim(out) == 0 else out


def quality(a, b) -> QualityReport:
    return QualityReport(psnr(a, b), ms_ssim(a, b))


# --------------------------------------------------------------------------
# Detection rates
# --------------------------------------------------------------------------


def tpr_at_fpr(positive_scores, negative_scores, fpr: float, direction: str = "higher-is-positive") -> float:
    """Fraction of positives beyond the threshold that at most ``fpr`` of negatives pass."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("score sets must be nonempty")
    if direction == "lower-is-positive":
        pos, neg = -pos, -neg
    elif direction != "higher-is-positive":
        raise ValueError(f"unknown direction {direction!r}")
    if not 0.0 <= fpr <= 1.0:
        raise ValueError("fpr must lie in [0, 1]")
    neg = np.sort(neg)
    idx = math.ceil(neg.size * (1.0 - fpr)) - 1
    if idx < 0:
        return 1.0
    return float(np.mean(pos > neg[idx]))


# --------------------------------------------------------------------------
# Autoencoder similarity
# --------------------------------------------------------------------------


def autoencoder_similarity(model_a, model_b, images) -> float:
    """Mean absolute cosine similarity between the two models' encodings.

    When channel counts differ, both latents are cut to the shared leading
    channels before flattening.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("need a nonempty batch of images")
    za, zb = model_a.encode(images), model_b.encode(images)
    if za.shape[-2:] != zb.shape[-2:]:
        raise ValueError("latent spatial shapes differ")
    c = min(za.shape[-3], zb.shape[-3])
    if c == 0:
        raise ValueError("no overlapping channels")
    za = za[:, :c].reshape(len(images), -1)
    zb = zb[:, :c].reshape(len(images), -1)
    cos = np.sum(za * zb, axis=1) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
    return float(np.mean(np.abs(cos)))


def similarity_matrix(models, images) -> np.ndarray:
    n = len(models)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = autoencoder_similarity(models[i], models[j], images)
    return out
