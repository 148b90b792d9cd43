"""ChaCha20 keystream generation (RFC 8439 variant: 32-bit counter, 96-bit nonce).

All blocks of a request are computed at once as columns of a uint32 array.
"""

from __future__ import annotations

import numpy as np

KEY_SIZE = 32
NONCE_SIZE = 12
BLOCK_SIZE = 64
DEFAULT_COUNTER = 1

_CONSTANTS = np.array([0x61707865, 0x3320646E, 0x79622D32, 0x6B206574], dtype=np.uint32)


def _rotl(v: np.ndarray, n: int) -> np.ndarray:
    return (v << np.uint32(n)) | (v >> np.uint32(32 - n))


def _quarter_round(x, a, b, c, d):
    x[a] += x[b]; x[d] ^= x[a]; x[d] = _rotl(x[d], 16)
    x[c] += x[d]; x[b] ^= x[c]; x[b] = _rotl(x[b], 12)
    x[a] += x[b]; x[d] ^= x[a]; x[d] = _rotl(x[d], 8)
    x[c] += x[d]; x[b] ^= x[c]; x[b] = _rotl(x[b], 7)


def chacha20_block(key: bytes, nonce: bytes, counter: int) -> bytes:
    """One 64-byte keystream block."""
    return chacha20_keystream(key, nonce, BLOCK_SIZE, counter=counter)


def chacha20_keystream(key: bytes, nonce: bytes, length: int, *, counter: int = DEFAULT_COUNTER) -> bytes:
    """Return ``length`` keystream bytes starting at block ``counter``."""
    if len(key) != KEY_SIZE:
        raise ValueError(f"key must be {KEY_SIZE} bytes")
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    if length < 0:
        raise ValueError("length must be nonnegative")
    n_blocks = -(-length // BLOCK_SIZE)
    if counter < 0 or counter + n_blocks > 2**32:
        raise ValueError("block counter would overflow 32 bits")
    if n_blocks == 0:
        return b""

    state = np.empty((16, n_blocks), dtype=np.uint32)
    state[0:4] = _CONSTANTS[:, None]
    state[4:12] = np.frombuffer(key, dtype="<u4")[:, None]
    state[12] = np.arange(counter, counter + n_blocks, dtype=np.uint64).astype(np.uint32)
    state[13:16] = np.frombuffer(nonce, dtype="<u4")[:, None]

    x = state.copy()
    with np.errstate(over="ignore"):
        for _ in range(10):
            _quarter_round(x, 0, 4, 8, 12)
            _quarter_round(x, 1, 5, 9, 13)
            _quarter_round(x, 2, 6, 10, 14)
            _quarter_round(x, 3, 7, 11, 15)
            _quarter_round(x, 0, 5, 10, 15)
            _quarter_round(x, 1, 6, 11, 12)
            _quarter_round(x, 2, 7, 8, 13)
            _quarter_round(x, 3, 4, 9, 14)
        x += state
    # column j is block j; serialize words little-endian, block after block
    return x.T.astype("<u4").tobytes()[:length]


def keystream_bits(key: bytes, nonce: bytes, n_bits: int, *, counter: int = DEFAULT_COUNTER) -> np.ndarray:
    """First ``n_bits`` keystream bits, most significant bit of each byte first."""
    stream = chacha20_keystream(key, nonce, -(-n_bits // 8), counter=counter)
    return np.unpackbits(np.frombuffer(stream, dtype=np.uint8))[:n_bits]
