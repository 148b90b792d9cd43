"""Gaussian Shading: stream-cipher message embedding in the sign of the initial latent.

The k-bit message is tiled ``rep`` times over the latent (spatial copies
first, channel copies only when needed), XOR-ed with a ChaCha20 keystream,
and bit ``i`` of the ciphertext picks the half of N(0, 1) that flattened
latent element ``i`` (row-major channel, row, column) is drawn from.

Extraction reverses this: sign quantization, decryption, and a per-bit
majority vote over the copies. Ties go to bit 1.

Thresholds use the exceedance convention: an image is detected when its
bit accuracy is strictly greater than ``tau``, and the per-message false
positive rate of ``tau = j/k`` is ``P(Binom(k, 1/2) > j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chacha import DEFAULT_COUNTER, KEY_SIZE, NONCE_SIZE, keystream_bits
from .numerics import SeededRng, binomial_tail_fpr, sample_halfspace_gaussian

DEFAULT_K = 256
DEFAULT_USERS = 100_000
DEFAULT_FPR = 1e-6


class InfeasibleThreshold(ValueError):
    """No threshold on the accuracy grid reaches the requested false positive rate."""


def _tiling(latent_shape, rep: int) -> tuple[int, int, int]:
    c, h, w = latent_shape
    for fc in range(1, c + 1):
        if c % fc or rep % fc:
            continue
        side = math.isqrt(rep // fc)
        if side * side == rep // fc and h % side == 0 and w % side == 0:
            return fc, side, side
    raise ValueError(f"cannot tile a latent of shape {latent_shape} with {rep} copies")


@dataclass(frozen=True)
class GsParams:
    k: int
    rep: int
    latent_shape: tuple[int, int, int]
    ell: int = 1

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(d) for d in self.latent_shape))
        if self.ell != 1:
            raise ValueError("only one bit per element (ell = 1) is supported")
        if self.k < 1 or self.rep < 1:
            raise ValueError("k and rep must be positive")
        if self.k * self.rep != int(np.prod(self.latent_shape)):
            raise ValueError(f"k * rep = {self.k * self.rep} does not match latent size {int(np.prod(self.latent_shape))}")
        _tiling(self.latent_shape, self.rep)

    @classmethod
    def for_latent(cls, latent_shape, k: int = DEFAULT_K) -> "GsParams":
        n = int(np.prod(latent_shape))
        if n % k:
            raise ValueError(f"latent size {n} is not a multiple of k={k}")
        return cls(k=k, rep=n // k, latent_shape=tuple(latent_shape))

    @property
    def tiling(self) -> tuple[int, int, int]:
        """Number of copies along (channel, row, column)."""
        return _tiling(self.latent_shape, self.rep)

    @property
    def block_shape(self) -> tuple[int, int, int]:
        return tuple(d // f for d, f in zip(self.latent_shape, self.tiling))

    @property
    def n_elements(self) -> int:
        return self.k * self.rep

    def diffuse(self, message: np.ndarray) -> np.ndarray:
        """Tile a k-bit message into a flattened latent-sized bit vector."""
        block = np.asarray(message, dtype=np.uint8).reshape(self.block_shape)
        return np.tile(block, self.tiling).ravel()

    def votes(self, bits: np.ndarray) -> np.ndarray:
        """Count ones over the copies of each message bit; input (..., n_elements)."""
        bits = np.asarray(bits)
        lead = bits.shape[:-1]
        (fc, fh, fw), (bc, bh, bw) = self.tiling, self.block_shape
        grid = bits.reshape(*lead, fc, bc, fh, bh, fw, bw)
        axes = tuple(len(lead) + i for i in (0, 2, 4))
        return grid.sum(axis=axes, dtype=np.int64).reshape(*lead, self.k)


@dataclass(frozen=True)
class GsKey:
    key: bytes
    nonce: bytes
    message: np.ndarray

    def __post_init__(self):
        if len(self.key) != KEY_SIZE or len(self.nonce) != NONCE_SIZE:
            raise ValueError("key must be 32 bytes and nonce 12 bytes")
        msg = np.asarray(self.message, dtype=np.uint8)
        if msg.ndim != 1 or not np.all(msg <= 1):
            raise ValueError("message must be a 1-D bit array")
        object.__setattr__(self, "message", msg)

    @classmethod
    def random(cls, rng: SeededRng, k: int = DEFAULT_K, message=None) -> "GsKey":
        """Fresh key and nonce; the message is random unless given."""
        key, nonce = rng.bytes(KEY_SIZE), rng.bytes(NONCE_SIZE)
        msg = rng.bits(k) if message is None else message
        return cls(key, nonce, msg)

    def to_hex(self) -> str:
        """Key (32 bytes) + nonce (12 bytes) + message packed MSB-first, as hex."""
        return (self.key + self.nonce + np.packbits(self.message).tobytes()).hex()

    @classmethod
    def from_hex(cls, text: str, k: int = DEFAULT_K) -> "GsKey":
        raw = bytes.fromhex(text)
        if len(raw) != KEY_SIZE + NONCE_SIZE + (k + 7) // 8:
            raise ValueError("serialized key has the wrong length")
        msg = np.unpackbits(np.frombuffer(raw[KEY_SIZE + NONCE_SIZE:], dtype=np.uint8))[:k]
        return cls(raw[:KEY_SIZE], raw[KEY_SIZE:KEY_SIZE + NONCE_SIZE], msg)

    def keystream(self, n_bits: int) -> np.ndarray:
        return keystream_bits(self.key, self.nonce, n_bits, counter=DEFAULT_COUNTER)


@dataclass(frozen=True)
class GsDetection:
    bit_accuracy: float
    detected: bool
    tau: float
    attributed_user: int | None = None


def _check_key(params: GsParams, gskey: GsKey):
    if gskey.message.size != params.k:
        raise ValueError(f"message has {gskey.message.size} bits, params expect {params.k}")


def gs_embed(params: GsParams, gskey: GsKey, rng: SeededRng) -> np.ndarray:
    """Sample a watermarked initial latent."""
    _check_key(params, gskey)
    cipher = params.diffuse(gskey.message) ^ gskey.keystream(params.n_elements)
    return sample_halfspace_gaussian(rng, cipher).reshape(params.latent_shape)


def gs_extract(z_hat, params: GsParams, gskey: GsKey) -> np.ndarray:
    """Recover the k message bits from an (estimated) initial latent.

    Accepts a batch of latents with leading dimensions.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.shape[-3:] != params.latent_shape:
        raise ValueError(f"latent shape {z_hat.shape[-3:]} does not match {params.latent_shape}")
    lead = z_hat.shape[:-3]
    quantized = (z_hat.reshape(*lead, params.n_elements) >= 0).astype(np.uint8)
    plain = quantized ^ gskey.keystream(params.n_elements)
    ones = params.votes(plain)
    # ties resolve to 1
    return (2 * ones >= params.rep).astype(np.uint8)


def bit_accuracy(m, m_hat) -> float:
    m, m_hat = np.asarray(m), np.asarray(m_hat)
    if m.shape[-1] != m_hat.shape[-1]:
        raise ValueError("messages differ in length")
    acc = np.mean(m == m_hat, axis=-1)
    return float(acc) if np.ndim(acc) == 0 else acc


def _matches(m, m_hat) -> np.ndarray:
    return np.sum(np.asarray(m) == np.asarray(m_hat), axis=-1)


def exceedance_fpr(k: int, j: int, n_users: int = 1) -> float:
    """FPR of accepting more than ``j`` matching bits, over ``n_users`` messages."""
    single = binomial_tail_fpr(k, (j + 1) / k)
    if n_users == 1 or single == 0.0:
        return single
    if single >= 1.0:
        return 1.0
    return -math.expm1(n_users * math.log1p(-single))


def gs_threshold(k: int = DEFAULT_K, fpr: float = DEFAULT_FPR, n_users: int = 1) -> float:
    """Smallest ``tau = j/k`` whose (multi-user) false positive rate is at most ``fpr``."""
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must lie in (0, 1)")
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    # j = k would reject every image
    for j in range(k):
        if exceedance_fpr(k, j, n_users) <= fpr:
            return j / k
    raise InfeasibleThreshold(f"no threshold reaches fpr={fpr} with k={k}, N={n_users}")


def gs_detect(z_hat, params: GsParams, gskey: GsKey, tau: float) -> GsDetection:
    acc = bit_accuracy(gskey.message, gs_extract(z_hat, params, gskey))
    return GsDetection(bit_accuracy=acc, detected=acc > tau, tau=tau)


def attribute(m_hat, user_pool, tau: float) -> tuple[int | None, float]:
    """Best-matching user and its accuracy; user is None when not above ``tau``.

    Ties at the best accuracy go to the lowest user index.
    """
    pool = np.asarray(user_pool, dtype=np.uint8)
    if pool.ndim != 2 or len(pool) == 0:
        raise ValueError("user pool must be a nonempty (N, k) bit array")
    matches = _matches(pool, np.asarray(m_hat, dtype=np.uint8)[None, :])
    best = int(np.argmax(matches))
    acc = matches[best] / pool.shape[1]
    return (best if acc > tau else None), float(acc)


def make_user_pool(rng: SeededRng, n_users: int, k: int = DEFAULT_K) -> np.ndarray:
    """Pseudorandom user messages; row 0 is the target user in experiments."""
    return rng.integers(0, 2, size=(n_users, k)).astype(np.uint8)


def resample_bins(z_hat, rng: SeededRng) -> np.ndarray:
    """Redraw magnitudes from the half-Gaussian while keeping every sign bin."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    return sample_halfspace_gaussian(rng, (z_hat >= 0).astype(np.uint8))
