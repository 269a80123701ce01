"""Interactive multi-pass parity bisection (Cascade).

Alice's key is the reference and never changes; she only answers parity
queries.  Bob drives: he asks for block parities in batches, bisects the
blocks whose parity disagrees, flips the located bits, and re-opens blocks
of earlier passes whose parity the flip has changed.

A query is a triple ``(pass, start, end)`` addressing positions
``perm[pass][start:end]``.  Alice's answers are cached by Bob, so a parity
is never disclosed twice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .keys import KeyBuffer, ProtocolAbort, Stage

ParityOracle = Callable[[np.ndarray], np.ndarray]


def initial_block_size(qber: float, n: int, factor: float = 0.73) -> int:
    if n <= 0:
        return 1
    if qber <= 0:
        return n
    return max(1, min(n, math.ceil(factor / qber)))


def pass_permutations(n: int, passes: int, seed: int) -> list[np.ndarray]:
    """Identity for the first pass, seeded shuffles after that."""
    rng = np.random.default_rng(seed)
    perms = [np.arange(n, dtype=np.int64)]
    perms += [rng.permutation(n).astype(np.int64) for _ in range(passes - 1)]
    return perms


def _prefix_parity(bits: np.ndarray, perm: np.ndarray) -> np.ndarray:
    cs = np.zeros(len(perm) + 1, dtype=np.int64)
    np.cumsum(bits[perm], out=cs[1:])
    return cs


class ParityResponder:
    """Alice's side: answers range-parity queries over her fixed key."""

    def __init__(self, bits: np.ndarray, perms: list[np.ndarray]):
        self._cs = [_prefix_parity(np.asarray(bits, dtype=np.uint8), p) for p in perms]
        self.disclosed = 0

    def __call__(self, queries: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(queries), dtype=np.uint8)
        for i, (p, s, e) in enumerate(queries):
            if not (0 <= p < len(self._cs) and 0 <= s < e < len(self._cs[p])):
                raise ProtocolAbort("reconcile", f"bad parity query {(p, s, e)}")
            cs = self._cs[p]
            out[i] = (cs[e] - cs[s]) & 1
        self.disclosed += len(queries)
        return out


@dataclass
class CascadeStats:
    top_level_parities: int = 0
    bisection_parities: int = 0
    corrections: int = 0
    rounds: int = 0
    block_sizes: tuple[int, ...] = ()

    @property
    def leaked(self) -> int:
        return self.top_level_parities + self.bisection_parities


class CascadeCorrector:
    """Bob's side of Cascade."""

    def __init__(self, bits: np.ndarray, qber: float, perms: list[np.ndarray], factor: float = 0.73):
        self.bits = np.array(bits, dtype=np.uint8)
        self.n = len(self.bits)
        self.perms = perms
        self.inv = [np.argsort(p) for p in perms]
        k1 = initial_block_size(qber, self.n, factor)
        self.block = [min(max(self.n, 1), k1 << j) for j in range(len(perms))]
        self.cache: dict[tuple[int, int, int], int] = {}
        self.stats = CascadeStats(block_sizes=tuple(self.block))

    def _ask(self, oracle: ParityOracle, queries: list[tuple[int, int, int]], top: bool) -> None:
        todo = sorted({q for q in queries if q not in self.cache})
        if not todo:
            return
        answers = np.asarray(oracle(np.array(todo, dtype=np.int64)), dtype=np.uint8)
        if len(answers) != len(todo):
            raise ProtocolAbort("reconcile", "parity reply does not match query")
        self.cache.update(zip(todo, (int(a) for a in answers)))
        if top:
            self.stats.top_level_parities += len(todo)
        else:
            self.stats.bisection_parities += len(todo)

    def _blocks(self, j: int) -> np.ndarray:
        return np.arange(0, self.n, self.block[j], dtype=np.int64)

    def _mismatched(self, j: int) -> list[tuple[int, int]]:
        starts = self._blocks(j)
        ends = np.minimum(starts + self.block[j], self.n)
        cs = _prefix_parity(self.bits, self.perms[j])
        bob = (cs[ends] - cs[starts]) & 1
        alice = np.fromiter((self.cache[(j, int(s), int(e))] for s, e in zip(starts, ends)),
                            dtype=np.int64, count=len(starts))
        bad = np.flatnonzero(bob != alice)
        return [(int(starts[b]), int(ends[b])) for b in bad]

    def run(self, oracle: ParityOracle) -> CascadeStats:
        if self.n == 0:
            return self.stats
        for j in range(len(self.perms)):
            starts = self._blocks(j)
            ends = np.minimum(starts + self.block[j], self.n)
            self._ask(oracle, [(j, int(s), int(e)) for s, e in zip(starts, ends)], top=True)
            self._settle(oracle, j)
        return self.stats

    def _settle(self, oracle: ParityOracle, upto: int) -> None:
        # active: (pass, block start) -> current sub-range with odd disagreement
        active: dict[tuple[int, int], tuple[int, int]] = {}
        flipped: list[int] = []
        while True:
            nxt: dict[tuple[int, int], tuple[int, int]] = {}
            for i in range(upto + 1):
                pos_i = self.inv[i][flipped] if flipped else None
                for s, e in self._mismatched(i):
                    cur = active.get((i, s))
                    if cur is not None and (pos_i is None or not np.any((pos_i >= cur[0]) & (pos_i < cur[1]))):
                        nxt[(i, s)] = cur
                    else:
                        nxt[(i, s)] = (s, e)
            active = nxt
            if not active:
                return
            self.stats.rounds += 1
            queries = []
            for (i, _), (s, e) in active.items():
                if e - s > 1:
                    queries.append((i, s, (s + e) // 2))
            self._ask(oracle, queries, top=False)

            to_flip: set[int] = set()
            for key, (s, e) in list(active.items()):
                i = key[0]
                if e - s > 1:
                    m = (s + e) // 2
                    bob_left = int(self.bits[self.perms[i][s:m]].sum() & 1)
                    s, e = (s, m) if bob_left != self.cache[(i, s, m)] else (m, e)
                if e - s == 1:
                    to_flip.add(int(self.perms[i][s]))
                    del active[key]
                else:
                    active[key] = (s, e)
            flipped = sorted(to_flip)
            if flipped:
                self.bits[flipped] ^= 1
                self.stats.corrections += len(flipped)


def reconcile(
    alice: KeyBuffer,
    bob: KeyBuffer,
    qber_estimate: float,
    channel: ParityOracle | None = None,
    seed: int = 0,
    passes: int = 4,
    block_factor: float = 0.73,
) -> tuple[KeyBuffer, KeyBuffer, int]:
    """Run Cascade in-process and return both keys at stage RECONCILED.

    ``channel`` replaces the in-process parity source (for instance to count
    or tamper with replies); it must answer the same query format.
    """
    if alice.stage != Stage.SIFTED or bob.stage != Stage.SIFTED:
        raise ValueError("reconciliation runs on sifted keys")
    if len(alice) != len(bob):
        raise ProtocolAbort("reconcile", "keys differ in length")
    perms = pass_permutations(len(alice), passes, seed)
    oracle = channel if channel is not None else ParityResponder(alice.bits, perms)
    corrector = CascadeCorrector(bob.bits, qber_estimate, perms, block_factor)
    stats = corrector.run(oracle)
    if not np.array_equal(corrector.bits, alice.bits):
        raise ProtocolAbort("reconcile", "residual errors after the last pass")
    a = alice.advance(Stage.RECONCILED)
    b = bob.advance(Stage.RECONCILED, corrector.bits)
    a.add_leakage(stats.leaked)
    b.add_leakage(stats.leaked)
    return a, b, stats.leaked
