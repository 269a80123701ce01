from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from pnpqkd.protocol import (
    KeyBuffer,
    SessionPolicy,
    Stage,
    final_key_length,
    privacy_amplify,
    random_seed_bits,
    toeplitz_hash,
    verify_keys,
)


def reconciled(bits):
    return KeyBuffer(np.asarray(bits, np.uint8), Stage.RECONCILED)


class TestToeplitz:
    @given(st.integers(0, 2**32), st.integers(1, 300), st.integers(1, 80))
    def test_matches_explicit_matrix(self, seed, n, m):
        rng = np.random.default_rng(seed)
        bits = rng.integers(0, 2, n).astype(np.uint8)
        s = random_seed_bits(rng, n, m)
        assert np.array_equal(toeplitz_hash(bits, s, m), oracles.toeplitz_matrix_hash(bits, s, m))

    def test_large_input_exact(self):
        rng = np.random.default_rng(1)
        bits = rng.integers(0, 2, 20_000).astype(np.uint8)
        s = random_seed_bits(rng, 20_000, 5_000)
        assert np.array_equal(toeplitz_hash(bits, s, 5_000), oracles.toeplitz_matrix_hash(bits, s, 5_000))

    def test_linear(self):
        rng = np.random.default_rng(2)
        x, y = rng.integers(0, 2, (2, 500)).astype(np.uint8)
        s = random_seed_bits(rng, 500, 64)
        assert np.array_equal(toeplitz_hash(x ^ y, s, 64), toeplitz_hash(x, s, 64) ^ toeplitz_hash(y, s, 64))

    def test_degenerate_shapes(self):
        assert len(toeplitz_hash(np.ones(5, np.uint8), np.ones(4, np.uint8), 0)) == 0
        assert toeplitz_hash(np.zeros(0, np.uint8), np.ones(2, np.uint8), 3).tolist() == [0, 0, 0]

    def test_seed_length_checked(self):
        with pytest.raises(ValueError):
            toeplitz_hash(np.zeros(10, np.uint8), np.zeros(10, np.uint8), 5)


class TestLength:
    def test_identity_at_zero_qber(self):
        assert final_key_length(10_000, 0.0, 0, 0) == 10_000

    def test_reference_point(self):
        # floor(10000 * (1 - pa(0.054))) = 7317
        assert int(np.floor(10_000 * (1 - oracles.pa(0.054)))) == 7317
        assert final_key_length(10_000, 0.054, 3000, 64) == 4253

    def test_floors_at_zero(self):
        assert final_key_length(100, 0.054, 3000, 64) == 0

    @given(st.integers(0, 10**6), st.floats(0, 0.5), st.integers(0, 10**5), st.integers(0, 256))
    def test_never_exceeds_pa_bound(self, n, q, leaked, margin):
        assert 0 <= final_key_length(n, q, leaked, margin) <= n * (1 - oracles.pa(q)) + 1e-9


class TestAmplify:
    def test_length_and_determinism(self):
        key = reconciled(np.random.default_rng(0).integers(0, 2, 10_000))
        pol = SessionPolicy()
        out = privacy_amplify(key, 0.054, 3000, pol, 1234)
        assert len(out) == 4253 and out.stage is Stage.FINAL
        assert np.array_equal(out.bits, privacy_amplify(key, 0.054, 3000, pol, 1234).bits)
        assert not np.array_equal(out.bits, privacy_amplify(key, 0.054, 3000, pol, 4321).bits)

    def test_no_secure_key_is_a_result(self):
        out = privacy_amplify(reconciled(np.ones(100)), 0.054, 3000, SessionPolicy(), 1)
        assert len(out) == 0 and out.stage is Stage.FINAL

    def test_zero_qber_no_margin_keeps_length(self):
        out = privacy_amplify(reconciled(np.ones(777)), 0.0, 0, SessionPolicy(pa_safety_margin_bits=0), 1)
        assert len(out) == 777

    def test_needs_reconciled_key(self):
        with pytest.raises(ValueError):
            privacy_amplify(KeyBuffer(np.ones(10), Stage.SIFTED), 0.0, 0, SessionPolicy(), 1)

    def test_output_bits_balanced(self):
        key = reconciled(np.random.default_rng(3).integers(0, 2, 300_000))
        out = privacy_amplify(key, 0.02, 0, SessionPolicy(), 99)
        assert abs(out.bits.mean() - 0.5) <= 3 * oracles.binom_sigma(0.5, len(out))


class TestVerify:
    def test_identical_and_empty(self):
        k = np.random.default_rng(0).integers(0, 2, 1000)
        a, b = reconciled(k), reconciled(k)
        assert verify_keys(a, b, np.random.default_rng(1))
        assert a.leaked_bits == b.leaked_bits == 64
        assert verify_keys(reconciled([]), reconciled([]), np.random.default_rng(1))

    def test_single_flip_detected(self):
        rng = np.random.default_rng(2)
        k = rng.integers(0, 2, 2000).astype(np.uint8)
        misses = 0
        for _ in range(10_000):
            other = k.copy()
            other[rng.integers(0, len(k))] ^= 1
            misses += verify_keys(reconciled(k), reconciled(other), rng)
        assert misses == 0

    def test_length_mismatch(self):
        assert not verify_keys(reconciled([1, 0]), reconciled([1]), np.random.default_rng(0))
