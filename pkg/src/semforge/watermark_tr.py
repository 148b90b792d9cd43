"""Tree-Ring: concentric rings in the centered spectrum of one latent channel.

Ring ``r`` is the set of bins whose rounded Euclidean distance to the
spectrum center equals ``r``. Every bin of a ring carries the ring's
complex target value, and its Hermitian mirror carries the conjugate, so
the embedded latent stays real.

Verification compares the observed spectrum with the pattern on one bin
of each Hermitian pair (the mirror carries no extra information):

    eta = sum |y_i - k_i|^2 / s2

where ``s2`` is the per-component variance estimated from the off-mask
bins of all channels. For an unwatermarked white latent ``eta`` follows a
noncentral chi-square with ``df = 2 * pairs`` and
``lam = sum |k_i|^2 / s2``; the p-value is its lower tail.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import SeededRng, fft2_centered, ifft2_centered, noncentral_chisq_cdf

DEFAULT_RINGS = 3
DEFAULT_MAX_RADIUS = 3.0
DEFAULT_CHANNEL = 2
DEFAULT_STRENGTH = 1.5
DEFAULT_FPR = 0.01


class CalibrationWarning(UserWarning):
    """Too few clean samples to resolve the requested false positive rate."""


def ring_index(size: int) -> np.ndarray:
    """Rounded distance of every centered-spectrum bin to the center."""
    offs = np.arange(size) - size // 2
    return np.rint(np.hypot(offs[:, None], offs[None, :])).astype(int)


def _canonical_half(size: int) -> np.ndarray:
    # one bin per Hermitian pair: positive column offset, or zero column and positive row offset
    offs = np.arange(size) - size // 2
    du, dv = offs[:, None], offs[None, :]
    return (dv > 0) | ((dv == 0) & (du > 0))


@dataclass(frozen=True)
class TrKey:
    channel: int
    radii: tuple[int, ...]
    values: tuple[complex, ...]
    size: int

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(int(r) for r in self.radii))
        object.__setattr__(self, "values", tuple(complex(v) for v in self.values))
        if len(self.radii) != len(self.values):
            raise ValueError("one value per ring is required")
        if len(set(self.radii)) != len(self.radii):
            raise ValueError("ring radii must be distinct")
        if any(r < 1 or r >= self.size // 2 for r in self.radii):
            raise ValueError(f"ring radii must lie in 1..{self.size // 2 - 1} for a {self.size}x{self.size} spectrum")

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean (size, size) mask of all ring bins, mirrors included."""
        return np.isin(ring_index(self.size), self.radii)

    @cached_property
    def half_mask(self) -> np.ndarray:
        return self.mask & _canonical_half(self.size)

    @cached_property
    def pattern(self) -> np.ndarray:
        """Target spectrum on the mask (zero elsewhere), Hermitian-symmetric."""
        rings = ring_index(self.size)
        pat = np.zeros((self.size, self.size), dtype=np.complex128)
        half = _canonical_half(self.size)
        for r, v in zip(self.radii, self.values):
            pat[(rings == r) & half] = v
        mirror = np.conj(pat[::-1, ::-1])
        # mirror about the center bin of an even-sized shifted grid
        mirror = np.roll(mirror, (1, 1), axis=(0, 1))
        return np.where(half, pat, mirror) * self.mask

    @property
    def df(self) -> int:
        return 2 * int(self.half_mask.sum())

    def to_text(self) -> str:
        return json.dumps({
            "channel": self.channel,
            "size": self.size,
            "rings": [[r, v.real, v.imag] for r, v in zip(self.radii, self.values)],
        }, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "TrKey":
        data = json.loads(text)
        rings = data["rings"]
        return cls(data["channel"], tuple(r for r, _, _ in rings),
                   tuple(complex(re, im) for _, re, im in rings), data["size"])


@dataclass(frozen=True)
class TrDetection:
    statistic: float
    p_value: float
    detected: bool
    sigma2: float
    threshold: float


def tr_make_key(rng: SeededRng, num_rings: int = DEFAULT_RINGS, max_radius: float = DEFAULT_MAX_RADIUS,
                channel: int = DEFAULT_CHANNEL, *, size: int = 8, channels: int = 4,
                strength: float = DEFAULT_STRENGTH) -> TrKey:
    """Draw a ring key: radii spread evenly up to ``max_radius``, values of
    magnitude ``strength * size`` with uniformly random phase."""
    if not 0 <= channel < channels:
        raise IndexError(f"channel {channel} out of range for {channels} channels")
    if num_rings < 0:
        raise ValueError("num_rings must be nonnegative")
    if num_rings and max_radius >= size / 2:
        raise ValueError(f"max_radius {max_radius} does not fit a {size}x{size} spectrum")
    radii = tuple(int(round((j + 1) * max_radius / num_rings)) for j in range(num_rings))
    phases = rng.uniform(num_rings) * 2.0 * np.pi
    values = tuple(strength * size * np.exp(1j * p) for p in phases)
    return TrKey(channel, radii, values, size)


def _check(z, key: TrKey) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[1:] != (key.size, key.size):
        raise ValueError(f"latent of shape {z.shape} does not match a {key.size}x{key.size} key")
    if not 0 <= key.channel < z.shape[0]:
        raise IndexError(f"key channel {key.channel} out of range for {z.shape[0]} channels")
    return z


def tr_embed(z_T, key: TrKey) -> np.ndarray:
    """Overwrite the ring bins of the key channel's spectrum with the pattern."""
    z = _check(z_T, key)
    spec = fft2_centered(z, key.channel)
    spec = np.where(key.mask, key.pattern, spec)
    real, _ = ifft2_centered(spec)
    out = z.copy()
    out[key.channel] = real
    return out


def estimate_sigma2(z_hat, key: TrKey) -> float:
    """Per-component spectral variance from every off-mask bin of every channel."""
    z = _check(z_hat, key)
    spectra = np.fft.fftshift(np.fft.fft2(z), axes=(-2, -1))
    power = np.abs(spectra) ** 2
    keep = np.ones(power.shape, dtype=bool)
    keep[key.channel] = ~key.mask
    return 0.5 * float(power[keep].mean())


def tr_statistic_with_variance(z_hat, key: TrKey) -> tuple[float, float]:
    """Return (eta, sigma2)."""
    z = _check(z_hat, key)
    sigma2 = estimate_sigma2(z, key)
    if not key.radii:
        return 0.0, sigma2
    if sigma2 <= 0.0:
        raise ValueError("spectral variance estimate is zero")
    spec = fft2_centered(z, key.channel)
    half = key.half_mask
    return float(np.sum(np.abs(spec[half] - key.pattern[half]) ** 2) / sigma2), sigma2


def tr_statistic(z_hat, key: TrKey) -> float:
    return tr_statistic_with_variance(z_hat, key)[0]


def null_sigma2(key: TrKey) -> float:
    """Per-component spectral variance of a unit white latent."""
    return key.size * key.size / 2.0


def noncentrality(key: TrKey, sigma2: float) -> float:
    half = key.half_mask
    return float(np.sum(np.abs(key.pattern[half]) ** 2) / sigma2)


def tr_pvalue(eta: float, key: TrKey, sigma2: float | None = None) -> float:
    """Lower-tail p-value of ``eta``; ``sigma2`` defaults to the white-noise value."""
    if eta < 0:
        raise ValueError("statistic must be nonnegative")
    if not key.radii or eta == 0.0:
        return 0.0
    sigma2 = null_sigma2(key) if sigma2 is None else sigma2
    return noncentral_chisq_cdf(key.df, noncentrality(key, sigma2), eta)


def tr_verify(z_hat, key: TrKey, threshold: float = DEFAULT_FPR) -> TrDetection:
    eta, sigma2 = tr_statistic_with_variance(z_hat, key)
    p = tr_pvalue(eta, key, sigma2)
    return TrDetection(statistic=eta, p_value=p, detected=p <= threshold, sigma2=sigma2, threshold=threshold)


def empirical_threshold(clean_pvalues, fpr: float) -> float:
    """Largest threshold that accepts at most ``fpr`` of the clean p-values."""
    p = np.sort(np.asarray(clean_pvalues, dtype=np.float64))
    n = p.size
    if n == 0:
        raise ValueError("need clean p-values")
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must lie in (0, 1)")
    if n < 10.0 / fpr:
        warnings.warn(f"{n} clean samples are too few to resolve fpr={fpr} (need {int(np.ceil(10 / fpr))})",
                      CalibrationWarning, stacklevel=2)
    idx = int(np.floor(fpr * n)) - 1
    return float(p[max(idx, 0)])


@dataclass(frozen=True)
class TrCalibration:
    threshold: float
    fpr: float
    clean_pvalues: np.ndarray
    watermarked_pvalues: np.ndarray

    @property
    def tpr(self) -> float:
        return float(np.mean(self.watermarked_pvalues <= self.threshold))


def tr_calibrate_threshold(model, key: TrKey, n: int, fpr: float = DEFAULT_FPR, rng: SeededRng | None = None,
                           *, conditions=None) -> TrCalibration:
    """Calibrate the p-value threshold on ``n`` clean and ``n`` watermarked generations.

    Images are generated with ``conditions`` (cycled over samples, default
    unconditional), decoded, re-encoded and inverted unconditionally.
    """
    from .diffusion.model import image_from_latent, latent_from_image

    if n < 100:
        raise ValueError("calibration needs n >= 100")
    if not key.radii:
        raise ValueError("cannot calibrate a key without rings")
    rng = SeededRng(0) if rng is None else rng
    z = rng.derive(1).normal((n,) + model.latent_shape)
    z_w = np.stack([tr_embed(zi, key) for zi in z])
    conds = [None] if conditions is None else list(conditions)

    def pvalues(latents):
        out = np.empty(n)
        for ci, c in enumerate(conds):
            sel = np.arange(ci, n, len(conds))
            rec = latent_from_image(model, image_from_latent(model, latents[sel], c))
            for i, zi in zip(sel, rec):
                out[i] = tr_verify(zi, key).p_value
        return out

    clean, wm = pvalues(z), pvalues(z_w)
    return TrCalibration(empirical_threshold(clean, fpr), fpr, clean, wm)
