from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare, hypergeom

import oracles
from pnpqkd.mc_sim import Cause, DetectionEvents
from pnpqkd.protocol import (
    KeyBuffer,
    ProtocolAbort,
    QuantumSymbol,
    SessionPolicy,
    Stage,
    alice_prepare,
    estimate_qber,
    sift,
)


def events(slots, bases, detectors):
    n = len(slots)
    return DetectionEvents(slot=np.asarray(slots, np.int64), detector=np.asarray(detectors, np.uint8),
                           bob_basis=np.asarray(bases, np.uint8), cause=np.full(n, Cause.PHOTON, np.uint8))


class TestSymbols:
    def test_four_states(self):
        assert len(set(QuantumSymbol)) == 4
        assert {(s.basis, s.bit) for s in QuantumSymbol} == {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert QuantumSymbol.of(1, 0) is QuantumSymbol.B1_0

    def test_policy_defaults(self):
        p = SessionPolicy()
        assert p.mu == 0.1 and p.pa_safety_margin_bits == 64 and p.sample_fraction == 0.5
        with pytest.raises(ValueError):
            SessionPolicy(sample_fraction=1.0)


class TestKeyBuffer:
    def test_stage_monotone(self):
        k = KeyBuffer(np.zeros(3), Stage.SIFTED)
        assert k.advance(Stage.FINAL).stage is Stage.FINAL
        with pytest.raises(ValueError):
            k.advance(Stage.RAW)

    def test_leakage_only_grows(self):
        k = KeyBuffer(np.zeros(3))
        k.add_leakage(5)
        with pytest.raises(ValueError):
            k.add_leakage(-1)
        assert k.leaked_bits == 5

    def test_hex(self):
        assert KeyBuffer([1, 0, 1, 0, 1, 0, 1, 0, 1]).hex() == "aa80"


class TestPrepare:
    def test_empty(self):
        assert len(alice_prepare(np.random.default_rng(0), 0)) == 0

    def test_uniform(self):
        codes = alice_prepare(np.random.default_rng(1), 10**6)
        counts = np.bincount(codes, minlength=4)
        assert np.all(np.abs(counts / 1e6 - 0.25) <= 3.5 * oracles.binom_sigma(0.25, 10**6))
        assert chisquare(counts).pvalue > 1e-4

    def test_replay(self):
        a = alice_prepare(np.random.default_rng(9), 1000)
        assert np.array_equal(a, alice_prepare(np.random.default_rng(9), 1000))


class TestSift:
    def test_no_detections(self):
        a, b = sift(np.zeros(10, np.uint8), events([], [], []))
        assert len(a) == len(b) == 0 and a.stage is Stage.SIFTED

    def test_hand_fixture(self):
        alice_bases = [0, 1, 1, 0, 1, 0, 1]
        alice_bits = [1, 0, 1, 0, 1, 1, 0]
        bob_bases = [1, 1, 0, 1, 1, 0, 0]  # agree at slots 1, 4, 5
        alice = np.array([QuantumSymbol.of(b, x) for b, x in zip(alice_bases, alice_bits)], np.uint8)
        a, b = sift(alice, events(range(7), bob_bases, [1, 0, 1, 1, 0, 1, 0]))
        assert len(a) == len(b) == 3
        assert a.bits.tolist() == [0, 1, 1]
        assert b.bits.tolist() == [0, 0, 1]

    def test_retains_half(self):
        n = 10**6
        rng = np.random.default_rng(3)
        codes = alice_prepare(rng, n)
        a, _ = sift(codes, events(np.arange(n), rng.integers(0, 2, n), rng.integers(0, 2, n)))
        assert abs(len(a) / n - 0.5) <= 3 * oracles.binom_sigma(0.5, n)

    @pytest.mark.parametrize("slots", [[3, 2], [1, 1], [0, 10], [-1, 2]])
    def test_misaligned_indices_abort(self, slots):
        with pytest.raises(ProtocolAbort) as exc:
            sift(np.zeros(10, np.uint8), events(slots, [0, 0], [0, 0]))
        assert exc.value.stage == "sift"

    @given(st.integers(0, 2**32), st.integers(1, 500))
    def test_keeps_exactly_matching_detections(self, seed, n):
        rng = np.random.default_rng(seed)
        codes = alice_prepare(rng, n)
        slots = np.flatnonzero(rng.random(n) < 0.3)
        bases = rng.integers(0, 2, len(slots))
        a, b = sift(codes, events(slots, bases, codes[slots] & 1))
        expect = [int(codes[s] & 1) for s, bb in zip(slots, bases) if codes[s] >> 1 == bb]
        assert a.bits.tolist() == expect == b.bits.tolist()


class TestEstimate:
    def test_identical(self):
        k = KeyBuffer(np.random.default_rng(0).integers(0, 2, 1000), Stage.SIFTED)
        q, a, b = estimate_qber(k, KeyBuffer(k.bits.copy(), Stage.SIFTED), 0.5, np.random.default_rng(1))
        assert q == 0 and len(a) == len(b) == 500
        assert a.leaked_bits == b.leaked_bits == 1000 and a.residual_leakage == 0

    def test_54_of_1000(self):
        rng = np.random.default_rng(2)
        bits = rng.integers(0, 2, 1000).astype(np.uint8)
        other = bits.copy()
        other[rng.choice(1000, 54, replace=False)] ^= 1
        ests = []
        for s in range(400):
            q, a, b = estimate_qber(KeyBuffer(bits, Stage.SIFTED), KeyBuffer(other, Stage.SIFTED), 0.5,
                                    np.random.default_rng(s))
            ests.append(q)
            assert abs(q - 0.054) <= 3 * oracles.binom_sigma(0.054, 500)
            assert int(np.count_nonzero(a.bits != b.bits)) == 54 - round(q * 500)
        dist = hypergeom(1000, 54, 500)
        assert np.mean(ests) == pytest.approx(dist.mean() / 500, abs=4 * dist.std() / 500 / np.sqrt(400))

    def test_sample_too_large(self):
        k = KeyBuffer(np.zeros(10), Stage.SIFTED)
        with pytest.raises(ProtocolAbort):
            estimate_qber(k, k, 0.5, np.random.default_rng(0), sample_size=11)
        with pytest.raises(ProtocolAbort):
            estimate_qber(KeyBuffer(np.zeros(0), Stage.SIFTED), KeyBuffer(np.zeros(0), Stage.SIFTED), 0.5,
                          np.random.default_rng(0))

    def test_requires_sifted(self):
        k = KeyBuffer(np.zeros(10))
        with pytest.raises(ValueError):
            estimate_qber(k, k, 0.5, np.random.default_rng(0))
