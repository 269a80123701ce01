"""BB84 symbols, staged key buffers, sifting and QBER sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from ..mc_sim import DetectionEvents


class ProtocolAbort(Exception):
    """A session stopped before producing a key; ``stage`` names where."""

    def __init__(self, stage: str, reason: str = ""):
        super().__init__(f"{stage}: {reason}" if reason else stage)
        self.stage = stage
        self.reason = reason


class QuantumSymbol(IntEnum):
    """The four BB84 phase states, encoded as ``basis << 1 | bit``."""

    B0_0 = 0
    B0_1 = 1
    B1_0 = 2
    B1_1 = 3

    @property
    def basis(self) -> int:
        return self.value >> 1

    @property
    def bit(self) -> int:
        return self.value & 1

    @classmethod
    def of(cls, basis: int, bit: int) -> "QuantumSymbol":
        return cls((basis << 1) | bit)


class Stage(IntEnum):
    RAW = 0
    SIFTED = 1
    RECONCILED = 2
    FINAL = 3


@dataclass
class KeyBuffer:
    """A key at one stage of distillation plus what has been said about it.

    ``leaked_bits`` counts every key-dependent bit written to the public
    channel; ``sampled_bits`` is the part of that which belonged to positions
    later discarded.
    """

    bits: np.ndarray
    stage: Stage = Stage.RAW
    leaked_bits: int = 0
    sampled_bits: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.bits)

    def add_leakage(self, n: int) -> None:
        if n < 0:
            raise ValueError("leakage only grows")
        self.leaked_bits += n

    def advance(self, stage: Stage, bits: np.ndarray | None = None) -> "KeyBuffer":
        if stage < self.stage:
            raise ValueError(f"cannot move from {self.stage.name} back to {stage.name}")
        return replace(self, stage=stage, bits=self.bits if bits is None else bits)

    @property
    def residual_leakage(self) -> int:
        """Disclosed bits that concern positions still in the key."""
        return self.leaked_bits - self.sampled_bits

    def hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()


@dataclass(frozen=True)
class SessionPolicy:
    mu: float = 0.1
    sample_fraction: float = 0.5
    cascade_passes: int = 4
    cascade_block_factor: float = 0.73
    pa_safety_margin_bits: int = 64
    verify_hash_bits: int = 64
    abort_qber: float | None = None

    def __post_init__(self):
        if not 0 < self.sample_fraction < 1:
            raise ValueError("sample_fraction must lie in (0, 1)")
        if self.cascade_passes < 1:
            raise ValueError("need at least one reconciliation pass")
        if self.pa_safety_margin_bits < 0 or self.verify_hash_bits < 1:
            raise ValueError("bad margin or hash length")


def alice_prepare(rng: np.random.Generator, n_slots: int) -> np.ndarray:
    """Uniform i.i.d. BB84 states as ``uint8`` codes (see :class:`QuantumSymbol`)."""
    return rng.integers(0, 4, size=n_slots, dtype=np.uint8)


def check_slot_indices(slots: np.ndarray, n_slots: int) -> None:
    if len(slots) and (slots[0] < 0 or slots[-1] >= n_slots or np.any(np.diff(slots) <= 0)):
        raise ProtocolAbort("sift", "detection indices are not strictly increasing within the session")


def sift(alice_record: np.ndarray, bob_events: DetectionEvents) -> tuple[KeyBuffer, KeyBuffer]:
    """Keep the detected slots where Alice's and Bob's bases agree."""
    alice_record = np.asarray(alice_record, dtype=np.uint8)
    slots = np.asarray(bob_events.slot, dtype=np.int64)
    check_slot_indices(slots, len(alice_record))
    a = alice_record[slots]
    match = (a >> 1) == bob_events.bob_basis
    alice = KeyBuffer(a[match] & 1, Stage.SIFTED)
    bob = KeyBuffer(np.asarray(bob_events.detector, dtype=np.uint8)[match], Stage.SIFTED)
    return alice, bob


def sample_positions(rng: np.random.Generator, n: int, sample_fraction: float,
                     sample_size: int | None = None) -> np.ndarray:
    k = math.ceil(sample_fraction * n) if sample_size is None else sample_size
    if n == 0 or k == 0:
        raise ProtocolAbort("estimate", "sifted key too short to sample")
    if k > n:
        raise ProtocolAbort("estimate", f"sample of {k} bits exceeds key of {n}")
    return np.sort(rng.choice(n, size=k, replace=False))


def drop_positions(buf: KeyBuffer, positions: np.ndarray, disclosed: int) -> KeyBuffer:
    keep = np.ones(len(buf), dtype=bool)
    keep[positions] = False
    out = replace(buf, bits=buf.bits[keep])
    out.add_leakage(disclosed)
    out.sampled_bits += disclosed
    return out


def estimate_qber(alice: KeyBuffer, bob: KeyBuffer, sample_fraction: float, rng: np.random.Generator,
                  sample_size: int | None = None) -> tuple[float, KeyBuffer, KeyBuffer]:
    """Compare a random sample in public, then discard it from both keys."""
    if alice.stage != Stage.SIFTED or bob.stage != Stage.SIFTED:
        raise ValueError("QBER sampling runs on sifted keys")
    if len(alice) != len(bob):
        raise ProtocolAbort("estimate", "sifted keys differ in length")
    pos = sample_positions(rng, len(alice), sample_fraction, sample_size)
    estimate = float(np.count_nonzero(alice.bits[pos] != bob.bits[pos])) / len(pos)
    # both sides publish their sampled bits
    disclosed = 2 * len(pos)
    return estimate, drop_positions(alice, pos, disclosed), drop_positions(bob, pos, disclosed)
