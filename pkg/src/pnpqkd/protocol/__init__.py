"""BB84 key distillation: sifting, sampling, Cascade, Toeplitz hashing, endpoints."""
from .cascade import CascadeCorrector, CascadeStats, ParityResponder, initial_block_size, pass_permutations, reconcile
from .hashing import final_key_length, key_digest, privacy_amplify, random_seed_bits, toeplitz_hash, verify_keys
from .keys import (
    KeyBuffer,
    ProtocolAbort,
    QuantumSymbol,
    SessionPolicy,
    Stage,
    alice_prepare,
    estimate_qber,
    sift,
)
from .session import Alice, Bob, SessionReport, derive_seeds, run_full_session

__all__ = [
    "Alice", "Bob", "CascadeCorrector", "CascadeStats", "KeyBuffer", "ParityResponder", "ProtocolAbort",
    "QuantumSymbol", "SessionPolicy", "SessionReport", "Stage", "alice_prepare", "derive_seeds",
    "estimate_qber", "final_key_length", "initial_block_size", "key_digest", "pass_permutations",
    "privacy_amplify", "random_seed_bits", "reconcile", "run_full_session", "sift", "toeplitz_hash",
    "verify_keys",
]
