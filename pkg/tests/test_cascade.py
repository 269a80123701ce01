from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pnpqkd.protocol import (
    CascadeCorrector,
    KeyBuffer,
    ParityResponder,
    ProtocolAbort,
    Stage,
    initial_block_size,
    pass_permutations,
    reconcile,
)


def noisy_pair(seed, n, n_errors):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, n).astype(np.uint8)
    b = a.copy()
    b[rng.choice(n, n_errors, replace=False)] ^= 1
    return KeyBuffer(a, Stage.SIFTED), KeyBuffer(b, Stage.SIFTED)


def test_block_size():
    assert initial_block_size(0.04, 1000) == 19
    assert initial_block_size(0.0, 1000) == 1000
    assert initial_block_size(0.5, 1000) == 2


def test_permutations_are_shared_and_valid():
    perms = pass_permutations(100, 4, 7)
    assert np.array_equal(perms[0], np.arange(100))
    assert all(sorted(p.tolist()) == list(range(100)) for p in perms)
    assert all(np.array_equal(p, q) for p, q in zip(perms, pass_permutations(100, 4, 7)))


def test_zero_errors_cost_one_parity_per_top_block():
    a, b = noisy_pair(0, 1000, 0)
    ra, rb, leaked = reconcile(a, b, 0.0)
    assert leaked == 4 and np.array_equal(ra.bits, rb.bits)
    a, b = noisy_pair(0, 1000, 0)
    _, _, leaked = reconcile(a, b, 0.04, passes=1)
    assert leaked == 53  # ceil(1000 / 19) blocks


def test_single_error_in_eight_bits():
    a, b = noisy_pair(1, 8, 1)
    perms = pass_permutations(8, 1, 0)
    corr = CascadeCorrector(b.bits, 0.73 / 8, perms)
    stats = corr.run(ParityResponder(a.bits, perms))
    assert stats.top_level_parities == 1
    assert stats.bisection_parities == 3
    assert stats.corrections == 1 and np.array_equal(corr.bits, a.bits)


@pytest.mark.parametrize("seed", range(10))
def test_four_percent_leakage_between_shannon_and_budget(seed):
    a, b = noisy_pair(seed, 1000, 40)
    ra, rb, leaked = reconcile(a, b, 0.04, seed=seed)
    assert np.array_equal(ra.bits, rb.bits)
    assert ra.stage is Stage.RECONCILED and ra.leaked_bits == leaked
    assert oracles.shannon(0.04) <= leaked / 1000 <= 1.25 * oracles.ec(0.04)


def test_large_key_efficiency():
    a, b = noisy_pair(3, 200_000, 8000)
    ra, rb, leaked = reconcile(a, b, 0.04, seed=3)
    assert np.array_equal(ra.bits, rb.bits)
    assert oracles.shannon(0.04) <= leaked / 200_000 <= 1.25 * oracles.ec(0.04)


def test_responder_counts_and_checks():
    r = ParityResponder(np.array([1, 0, 1, 1], np.uint8), pass_permutations(4, 1, 0))
    assert r(np.array([[0, 0, 4], [0, 1, 3]])).tolist() == [1, 1]
    assert r.disclosed == 2
    with pytest.raises(ProtocolAbort):
        r(np.array([[0, 2, 2]]))
    with pytest.raises(ProtocolAbort):
        r(np.array([[1, 0, 2]]))


def test_residual_mismatch_aborts():
    a, b = noisy_pair(4, 1000, 100)
    with pytest.raises(ProtocolAbort) as exc:
        reconcile(a, b, 0.1, passes=1)
    assert exc.value.stage == "reconcile"


def test_replies_are_never_repeated():
    a, b = noisy_pair(5, 5000, 200)
    perms = pass_permutations(5000, 4, 5)
    seen = []
    responder = ParityResponder(a.bits, perms)

    def oracle(q):
        seen.extend(map(tuple, np.asarray(q).tolist()))
        return responder(q)

    stats = CascadeCorrector(b.bits, 0.04, perms).run(oracle)
    assert len(seen) == len(set(seen)) == stats.leaked


@settings(max_examples=40)
@given(st.integers(0, 2**32), st.integers(1, 3000), st.floats(0, 0.06))
def test_corrects_moderate_noise(seed, n, rate):
    k = int(rate * n)
    a, b = noisy_pair(seed, n, k)
    ra, rb, leaked = reconcile(a, b, max(rate, 1e-3), seed=seed)
    assert np.array_equal(ra.bits, rb.bits)
    assert leaked >= min(4, n)
