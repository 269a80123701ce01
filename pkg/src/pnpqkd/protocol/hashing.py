"""Toeplitz hashing: key verification and privacy amplification."""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

from ..analytic import pa_fraction
from .keys import KeyBuffer, SessionPolicy, Stage


def toeplitz_seed_length(n_in: int, n_out: int) -> int:
    return max(0, n_in + n_out - 1)


def random_seed_bits(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.integers(0, 2, size=toeplitz_seed_length(n_in, n_out), dtype=np.uint8)


def toeplitz_hash(bits: np.ndarray, seed_bits: np.ndarray, n_out: int) -> np.ndarray:
    """Multiply by the ``n_out x n`` binary Toeplitz matrix ``T[i, j] = seed[i - j + n - 1]``.

    Computed as a convolution over the integers, reduced mod 2.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    seed_bits = np.asarray(seed_bits, dtype=np.uint8)
    n = len(bits)
    if n_out == 0:
        return np.zeros(0, dtype=np.uint8)
    if len(seed_bits) != toeplitz_seed_length(n, n_out):
        raise ValueError(f"seed must hold {toeplitz_seed_length(n, n_out)} bits, got {len(seed_bits)}")
    if n == 0:
        return np.zeros(n_out, dtype=np.uint8)
    conv = fftconvolve(seed_bits.astype(np.float64), bits.astype(np.float64))
    window = conv[n - 1 : n - 1 + n_out]
    return (np.rint(window).astype(np.int64) & 1).astype(np.uint8)


def key_digest(bits: np.ndarray, seed_bits: np.ndarray, n_out: int = 64) -> bytes:
    return np.packbits(toeplitz_hash(bits, seed_bits, n_out)).tobytes()


def verify_keys(alice: KeyBuffer, bob: KeyBuffer, rng: np.random.Generator, hash_bits: int = 64) -> bool:
    """Compare ``hash_bits``-bit Toeplitz digests under a fresh public seed.

    For distinct keys the digests collide with probability 2**-hash_bits.
    Both buffers are charged ``hash_bits`` of leakage.
    """
    if alice.stage < Stage.RECONCILED or bob.stage < Stage.RECONCILED:
        raise ValueError("verification runs after reconciliation")
    if len(alice) != len(bob):
        return False
    seed = random_seed_bits(rng, len(alice), hash_bits)
    same = key_digest(alice.bits, seed, hash_bits) == key_digest(bob.bits, seed, hash_bits)
    alice.add_leakage(hash_bits)
    bob.add_leakage(hash_bits)
    return same


def final_key_length(n: int, qber: float, leaked_bits: int, margin_bits: int) -> int:
    return max(0, math.floor(n * (1.0 - pa_fraction(qber))) - leaked_bits - margin_bits)


def privacy_amplify(
    buffer: KeyBuffer,
    qber: float,
    leaked_bits: int,
    policy: SessionPolicy,
    public_seed,
) -> KeyBuffer:
    """Compress a reconciled key to its secure length.

    ``public_seed`` is either an integer (expanded with a PRNG) or the seed
    bit string itself.  A zero-length result is returned, not raised, when
    nothing secure is left.
    """
    if buffer.stage != Stage.RECONCILED:
        raise ValueError("privacy amplification needs a reconciled key")
    m = final_key_length(len(buffer), qber, leaked_bits, policy.pa_safety_margin_bits)
    if m == 0:
        return buffer.advance(Stage.FINAL, np.zeros(0, dtype=np.uint8))
    if isinstance(public_seed, (int, np.integer)):
        seed_bits = random_seed_bits(np.random.default_rng(int(public_seed)), len(buffer), m)
    else:
        seed_bits = np.asarray(public_seed, dtype=np.uint8)
    return buffer.advance(Stage.FINAL, toeplitz_hash(buffer.bits, seed_bits, m))
