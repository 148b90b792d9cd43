"""Numerical primitives shared by both watermark schemes.

Grids are plain ``numpy`` arrays of shape ``(channels, height, width)``.
Spectra use an unnormalized forward 2D DFT with the zero frequency shifted
to the spatial center; the inverse carries the ``1/N^2`` factor.

The incomplete beta/gamma functions and the noncentral chi-square CDF are
implemented here rather than taken from scipy so that the detection
thresholds do not drift with the host library version.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NumericalError",
    "SeededRng",
    "as_real_grid",
    "fft2_centered",
    "ifft2_centered",
    "reg_incomplete_beta",
    "reg_lower_gamma",
    "chisq_cdf",
    "binomial_tail_fpr",
    "noncentral_chisq_cdf",
    "sample_halfspace_gaussian",
]

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


class NumericalError(ArithmeticError):
    """A series or continued fraction failed to converge."""


def as_real_grid(x, *, name: str = "grid") -> np.ndarray:
    """Validate and return ``x`` as a finite float64 array of shape (C, H, W)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{name} must have shape (channels, height, width), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------


@dataclass
class SeededRng:
    """Counter-based random stream (Philox) addressed by a seed and a key path.

    Streams derived with :meth:`derive` are statistically independent of the
    parent and of each other, so shards can draw without coordination.
    """

    seed: int
    key: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(self.seed)
        self.key = tuple(int(k) for k in self.key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    @property
    def position(self) -> int:
        """Philox block counter; advances as values are drawn."""
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.uint8)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)


def sample_halfspace_gaussian(rng: SeededRng, bit):
    """Draw from the negative (bit 0) or nonnegative (bit 1) half of N(0, 1).

    ``bit`` may be a scalar or an array of bits; the result has its shape.
    Over uniformly random bits the marginal is exactly standard normal.
    """
    bits = np.asarray(bit)
    if bits.size and not np.all((bits == 0) | (bits == 1)):
        raise ValueError("bits must be 0 or 1")
    mag = np.abs(rng.normal(bits.shape))
    # bit 0 must be strictly negative
    mag = np.where(mag == 0.0, np.nextafter(0.0, 1.0), mag)
    out = np.where(bits == 1, mag, -mag)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Centered FFT
# --------------------------------------------------------------------------


def fft2_centered(grid, channel: int) -> np.ndarray:
    """Unnormalized 2D DFT of one channel with DC moved to the center."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError("grid must have shape (channels, height, width)")
    if not 0 <= channel < grid.shape[0]:
        raise IndexError(f"channel {channel} out of range for {grid.shape[0]} channels")
    return np.fft.fftshift(np.fft.fft2(grid[channel]))


def ifft2_centered(spectrum) -> tuple[np.ndarray, float]:
    """Inverse of :func:`fft2_centered`.

    Returns the real part together with the largest imaginary magnitude that
    was discarded; the residue is ~1e-16 for a Hermitian-symmetric spectrum.
    """
    spatial = np.fft.ifft2(np.fft.ifftshift(np.asarray(spectrum, dtype=np.complex128)))
    return spatial.real.copy(), float(np.max(np.abs(spatial.imag), initial=0.0))


# --------------------------------------------------------------------------
# Special functions
# --------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise NumericalError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def reg_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def reg_lower_gamma(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 0.0
    log_front = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        ap, term = a, 1.0 / a
        total = term
        for _ in range(_MAX_ITER):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                return min(1.0, total * math.exp(log_front))
        raise NumericalError(f"lower gamma series did not converge (a={a}, x={x})")
    # continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return max(0.0, 1.0 - math.exp(log_front) * h)
    raise NumericalError(f"upper gamma continued fraction did not converge (a={a}, x={x})")


def chisq_cdf(df: float, x: float) -> float:
    """Central chi-square CDF."""
    if x <= 0:
        return 0.0
    return reg_lower_gamma(df / 2.0, x / 2.0)


def binomial_tail_fpr(k: int, tau: float) -> float:
    """P(Binom(k, 1/2) >= ceil(tau * k)), evaluated through I_{1/2}."""
    if k < 1:
        raise ValueError("k must be >= 1")
    j = math.ceil(tau * k)
    if j <= 0:
        return 1.0
    if j > k:
        return 0.0
    # P(X >= j) = I_p(j, k - j + 1)
    return reg_incomplete_beta(float(j), float(k - j + 1), 0.5)


def noncentral_chisq_cdf(df: int, lam: float, x: float, *, tol: float = 1e-12) -> float:
    """CDF of the noncentral chi-square distribution.

    Poisson(lam/2)-weighted mixture of central chi-square CDFs, summed
    outward from the Poisson mode until a geometric bound on each
    unvisited tail drops below ``tol``.
    """
    if df < 1:
        raise ValueError("df must be >= 1")
    if lam < 0:
        raise ValueError("noncentrality must be nonnegative")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 0.0
    mu = lam / 2.0
    if mu == 0.0:
        # also catches subnormal lam, whose half underflows
        return chisq_cdf(df, x)

    half_df, half_x = df / 2.0, x / 2.0
    mode = int(math.floor(mu))

    def log_weight(j: int) -> float:
        return -mu + j * math.log(mu) - math.lgamma(j + 1.0)

    total = 0.0
    mass = 0.0
    lo, hi = mode, mode + 1
    for _ in range(_MAX_ITER):
        w_lo = 0.0
        if lo >= 0:
            w_lo = math.exp(log_weight(lo))
            total += w_lo * reg_lower_gamma(half_df + lo, half_x)
            mass += w_lo
            lo -= 1
        w_hi = math.exp(log_weight(hi))
        total += w_hi * reg_lower_gamma(half_df + hi, half_x)
        mass += w_hi
        hi += 1
        # Poisson tails shrink at least geometrically beyond the frontier
        upper = w_hi / (1.0 - mu / hi)
        lower = 0.0 if lo < 0 else w_lo / max(1.0 - (lo + 1) / mu, _EPS)
        if upper < tol and lower < tol:
            # normalizing by the visited mass absorbs lgamma rounding at large lam
            return min(1.0, max(0.0, total / mass))
    raise NumericalError(f"noncentral chi-square series did not converge (df={df}, lam={lam}, x={x})")
