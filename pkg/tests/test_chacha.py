import numpy as np
import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from hypothesis import given, settings
from hypothesis import strategies as st

from semforge.chacha import chacha20_block, chacha20_keystream, keystream_bits

RFC_KEY = bytes(range(32))
RFC_BLOCK_NONCE = bytes.fromhex("000000090000004a00000000")
# RFC 8439 section 2.3.2, counter 1
RFC_BLOCK = bytes.fromhex(
    "10f1e7e4d13b5915500fdd1fa32071c4c7d1f4c733c068030422aa9ac3d46c4e"
    "d2826446079faa0914c2d705d98b02a2b5129cd1de164eb9cbd083e8a2503c4e"
)
# RFC 8439 appendix A.1 test vector 1: zero key, zero nonce, counter 0
ZERO_BLOCK = bytes.fromhex(
    "76b8e0ada0f13d90405d6ae55386bd28bdd219b8a08ded1aa836efcc8b770dc7"
    "da41597c5157488d7724e03fb8d84a376a43b8f41518a11cc387b669b2ee6586"
)


def _reference(key, nonce, length, counter):
    full_nonce = counter.to_bytes(4, "little") + nonce
    enc = Cipher(algorithms.ChaCha20(key, full_nonce), mode=None).encryptor()
    return enc.update(b"\0" * length)


def test_rfc_block_vector():
    assert chacha20_block(RFC_KEY, RFC_BLOCK_NONCE, 1) == RFC_BLOCK


def test_rfc_zero_vector():
    assert chacha20_block(bytes(32), bytes(12), 0) == ZERO_BLOCK


def test_multi_block_and_partial_lengths():
    nonce = bytes.fromhex("000000000000004a00000000")
    ks = chacha20_keystream(RFC_KEY, nonce, 200)
    assert ks == _reference(RFC_KEY, nonce, 200, 1)
    assert chacha20_keystream(RFC_KEY, nonce, 0) == b""


def test_bits_are_msb_first():
    ks = chacha20_keystream(RFC_KEY, RFC_BLOCK_NONCE, 2)
    bits = keystream_bits(RFC_KEY, RFC_BLOCK_NONCE, 16)
    assert np.array_equal(bits, np.unpackbits(np.frombuffer(ks, dtype=np.uint8)))
    assert bits[:8].tolist() == [int(c) for c in f"{ks[0]:08b}"]


def test_input_validation():
    with pytest.raises(ValueError):
        chacha20_keystream(bytes(31), bytes(12), 10)
    with pytest.raises(ValueError):
        chacha20_keystream(bytes(32), bytes(8), 10)
    with pytest.raises(ValueError):
        chacha20_keystream(bytes(32), bytes(12), 128, counter=2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.binary(min_size=12, max_size=12),
       st.integers(0, 700), st.integers(0, 2**31))
def test_matches_cryptography_package(key, nonce, length, counter):
    assert chacha20_keystream(key, nonce, length, counter=counter) == _reference(key, nonce, length, counter)
