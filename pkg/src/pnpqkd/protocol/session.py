"""Alice and Bob endpoints and the end-to-end session driver.

Message sequence on the public channel (A = Alice, B = Bob)::

    A -> B  SESSION_CONFIG   policy, slot count, permutation seed
            (states travel over the simulated fibre)
    B -> A  BASIS_REVEAL     Bob's bases + detected slot numbers
    A -> B  BASIS_REVEAL     Alice's bases at those slots
    A -> B  SAMPLE_INDICES   positions of the QBER sample
    B -> A  SAMPLE_BITS      Bob's sampled bits
    A -> B  SAMPLE_BITS      Alice's sampled bits
    B -> A  PARITY_QUERY ... (pass, start, end) triples; empty = done
    A -> B  PARITY_REPLY ... one parity per triple
    A -> B  HASH_SEED, KEY_HASH    verification digest
    B -> A  HASH_SEED        privacy-amplification seed (or ABORT)

Both sides decide on the QBER abort independently from identical data.
List-valued messages are split into frames of ``LIST_CHUNK`` entries; a
frame holding fewer entries (possibly none) ends the list.
"""
from __future__ import annotations

import hashlib
import json
import math
import queue
import socket
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..analytic import CapacityWarning, TrainSchedule, distillation_threshold, effective_rep_rate
from ..mc_sim import LinkConfig, QuantumChannel, SlotBits, intercept_resend_channel
from ..transport import (
    QUANTUM_STATES,
    AuditedEndpoint,
    Endpoint,
    EndpointClosed,
    FramingError,
    MessageType,
    SocketEndpoint,
    memory_pair,
    pack_bits,
    pack_u32,
    unpack_bits,
    unpack_u32,
)
from .cascade import CascadeCorrector, ParityResponder, pass_permutations
from .hashing import final_key_length, key_digest, random_seed_bits, toeplitz_hash
from .keys import KeyBuffer, ProtocolAbort, SessionPolicy, Stage, alice_prepare, check_slot_indices, drop_positions, sample_positions

RECV_TIMEOUT = 120.0
_CODES_PER_FRAME = 1 << 22


# -- simulated fibre ---------------------------------------------------------

class MemoryFiber:
    def __init__(self):
        self._q: queue.Queue = queue.Queue()

    def emit(self, codes: np.ndarray) -> None:
        self._q.put(codes)

    def collect(self, timeout: float | None = RECV_TIMEOUT) -> np.ndarray:
        return self._q.get(timeout=timeout)


class SocketFiber:
    """State stream over its own connection; 2 bits per state."""

    def __init__(self, ep: Endpoint):
        self.ep = ep

    def emit(self, codes: np.ndarray) -> None:
        codes = np.asarray(codes, dtype=np.uint8)
        self.ep.send(QUANTUM_STATES, len(codes).to_bytes(8, "big"))
        for start in range(0, len(codes), _CODES_PER_FRAME):
            chunk = codes[start:start + _CODES_PER_FRAME]
            bits = np.stack([chunk >> 1, chunk & 1], axis=1).ravel()
            self.ep.send(QUANTUM_STATES, np.packbits(bits).tobytes())

    def collect(self, timeout: float | None = RECV_TIMEOUT) -> np.ndarray:
        _, head = self.ep.recv(timeout)
        n = int.from_bytes(head, "big")
        parts = []
        got = 0
        while got < n:
            _, payload = self.ep.recv(timeout)
            m = min(_CODES_PER_FRAME, n - got)
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=2 * m).reshape(m, 2)
            parts.append(((bits[:, 0] << 1) | bits[:, 1]).astype(np.uint8))
            got += m
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)


# -- endpoints ---------------------------------------------------------------

@dataclass
class EndpointResult:
    role: str
    final: KeyBuffer | None = None
    reconcile_input: np.ndarray | None = None
    qber_estimate: float = math.nan
    n_detections: int = 0
    n_sifted: int = 0
    n_sampled: int = 0
    parity_bits: int = 0
    leaked_bits: int = 0
    aborted_stage: str = ""
    abort_reason: str = ""
    remote_abort: bool = False
    transcript: list = field(default_factory=list, repr=False)
    audit_leaked: int = 0


def _expect(ep: Endpoint, msg_type: MessageType) -> bytes:
    got, payload = ep.recv(RECV_TIMEOUT)
    if got == MessageType.ABORT:
        stage, _, reason = payload.decode("utf-8", "replace").partition(":")
        exc = ProtocolAbort(stage, reason.strip())
        exc.remote = True
        raise exc
    if got != msg_type:
        raise ProtocolAbort("protocol", f"expected {msg_type.name}, got 0x{got:02x}")
    return payload


LIST_CHUNK = 1 << 20


def _send_list(ep: Endpoint, msg_type: MessageType, n: int, encode) -> None:
    """Send ``n`` entries; ``encode(start, end)`` builds one frame's payload."""
    start = 0
    while True:
        end = min(n, start + LIST_CHUNK)
        ep.send(msg_type, encode(start, end))
        if end - start < LIST_CHUNK:
            return
        start = end


def _recv_list(ep: Endpoint, msg_type: MessageType, decode) -> tuple[np.ndarray, ...]:
    """Inverse of :func:`_send_list`; ``decode`` returns a tuple of equal-length arrays."""
    parts = []
    while True:
        part = decode(_expect(ep, msg_type))
        if len(part[0]) > LIST_CHUNK:
            raise ProtocolAbort("protocol", f"{msg_type.name} frame exceeds {LIST_CHUNK} entries")
        parts.append(part)
        if len(part[0]) < LIST_CHUNK:
            return tuple(np.concatenate(cols) for cols in zip(*parts))


def _bits(payload: bytes) -> tuple[np.ndarray]:
    return (unpack_bits(payload)[0],)


def _u32(payload: bytes) -> tuple[np.ndarray]:
    return (unpack_u32(payload),)


def _bases_and_slots(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    bases, rest = unpack_bits(payload)
    slots = unpack_u32(rest)
    if len(slots) != len(bases):
        raise ProtocolAbort("sift", "basis list and slot list differ in length")
    return bases, slots


def _triples(payload: bytes) -> tuple[np.ndarray]:
    q = unpack_u32(payload)
    if len(q) % 3:
        raise ProtocolAbort("reconcile", "parity query is not a list of triples")
    return (q.reshape(-1, 3),)


def _abort_threshold(policy: SessionPolicy) -> float:
    return policy.abort_qber if policy.abort_qber is not None else distillation_threshold()


def _send_abort(ep: Endpoint, exc: ProtocolAbort) -> None:
    try:
        ep.send(MessageType.ABORT, f"{exc.stage}: {exc.reason}".encode())
    except Exception:
        pass


def _estimate(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.count_nonzero(a != b)) / len(a)


class _Endpoint:
    role = ""

    def __init__(self, chan: Endpoint):
        self.chan = AuditedEndpoint(chan)
        self.result = EndpointResult(self.role)

    def run(self) -> EndpointResult:
        try:
            self._run()
        except ProtocolAbort as exc:
            self.result.aborted_stage = exc.stage
            self.result.abort_reason = exc.reason
            self.result.remote_abort = getattr(exc, "remote", False)
            if not self.result.remote_abort and getattr(exc, "notify", True):
                _send_abort(self.chan, exc)
        except EndpointClosed as exc:
            self.result.aborted_stage = "transport"
            self.result.abort_reason = str(exc)
        except FramingError as exc:
            # malformed payload from the peer: fail closed and tell them why
            self.result.aborted_stage = "protocol"
            self.result.abort_reason = str(exc)
            _send_abort(self.chan, ProtocolAbort("protocol", str(exc)))
        finally:
            self.result.transcript = self.chan.transcript
            self.result.audit_leaked = self.chan.leaked_bits
        return self.result

    def _check_qber(self, estimate: float, policy: SessionPolicy) -> None:
        self.result.qber_estimate = estimate
        if estimate >= _abort_threshold(policy):
            exc = ProtocolAbort("estimate", f"qber={estimate:.3f}, eavesdropping assumed")
            exc.notify = False
            raise exc


class Alice(_Endpoint):
    role = "alice"

    def __init__(self, policy: SessionPolicy, n_slots: int, rng: np.random.Generator, chan: Endpoint, fiber):
        super().__init__(chan)
        if not 0 <= n_slots < 2**32:
            raise ValueError("n_slots must fit in 32 bits")
        self.policy = policy
        self.n_slots = n_slots
        self.rng = rng
        self.fiber = fiber

    def _run(self) -> None:
        policy, chan, res = self.policy, self.chan, self.result
        perm_seed = int(self.rng.integers(0, 2**63))
        cfg = {
            "n_slots": self.n_slots,
            "sample_fraction": policy.sample_fraction,
            "cascade_passes": policy.cascade_passes,
            "cascade_block_factor": policy.cascade_block_factor,
            "pa_safety_margin_bits": policy.pa_safety_margin_bits,
            "verify_hash_bits": policy.verify_hash_bits,
            "abort_qber": policy.abort_qber,
            "perm_seed": perm_seed,
        }
        chan.send(MessageType.SESSION_CONFIG, json.dumps(cfg, sort_keys=True).encode())

        codes = alice_prepare(self.rng, self.n_slots)
        self.fiber.emit(codes)

        bob_bases, slots = _recv_list(chan, MessageType.BASIS_REVEAL, _bases_and_slots)
        check_slot_indices(slots, self.n_slots)
        a = codes[slots]
        _send_list(chan, MessageType.BASIS_REVEAL, len(a), lambda s, e: pack_bits(a[s:e] >> 1))
        key = KeyBuffer(a[(a >> 1) == bob_bases] & 1, Stage.SIFTED)
        res.n_detections, res.n_sifted = len(slots), len(key)

        pos = sample_positions(self.rng, len(key), policy.sample_fraction)
        _send_list(chan, MessageType.SAMPLE_INDICES, len(pos), lambda s, e: pack_u32(pos[s:e]))
        (bob_sample,) = _recv_list(chan, MessageType.SAMPLE_BITS, _bits)
        if len(bob_sample) != len(pos):
            raise ProtocolAbort("estimate", "sample reply has the wrong length")
        mine = key.bits[pos]
        _send_list(chan, MessageType.SAMPLE_BITS, len(pos), lambda s, e: pack_bits(mine[s:e]))
        res.n_sampled = len(pos)
        estimate = _estimate(key.bits[pos], bob_sample)
        key = drop_positions(key, pos, 2 * len(pos))
        res.reconcile_input = key.bits.copy()
        self._check_qber(estimate, policy)

        responder = ParityResponder(key.bits, pass_permutations(len(key), policy.cascade_passes, perm_seed))
        while True:
            (query,) = _recv_list(chan, MessageType.PARITY_QUERY, _triples)
            if len(query) == 0:
                break
            reply = responder(query)
            _send_list(chan, MessageType.PARITY_REPLY, len(reply), lambda s, e: pack_bits(reply[s:e]))
        res.parity_bits = responder.disclosed
        key.add_leakage(responder.disclosed)
        key = key.advance(Stage.RECONCILED)

        h = policy.verify_hash_bits
        vseed = random_seed_bits(self.rng, len(key), h)
        chan.send(MessageType.HASH_SEED, pack_bits(vseed))
        chan.send(MessageType.KEY_HASH, key_digest(key.bits, vseed, h))
        key.add_leakage(h)

        pa_seed, _ = unpack_bits(_expect(chan, MessageType.HASH_SEED))
        m = final_key_length(len(key), estimate, key.residual_leakage, policy.pa_safety_margin_bits)
        if m and len(pa_seed) != len(key) + m - 1:
            raise ProtocolAbort("amplify", "privacy-amplification seed has the wrong length")
        res.final = key.advance(Stage.FINAL, toeplitz_hash(key.bits, pa_seed, m) if m else np.zeros(0, np.uint8))
        res.leaked_bits = key.leaked_bits


class Bob(_Endpoint):
    role = "bob"

    def __init__(self, rng: np.random.Generator, chan: Endpoint, fiber, channel: QuantumChannel,
                 channel_rng: np.random.Generator):
        super().__init__(chan)
        self.rng = rng
        self.fiber = fiber
        self.channel = channel
        self.channel_rng = channel_rng
        self.policy: SessionPolicy | None = None

    def _run(self) -> None:
        chan, res = self.chan, self.result
        cfg = json.loads(_expect(chan, MessageType.SESSION_CONFIG))
        perm_seed = cfg.pop("perm_seed")
        n_slots = cfg.pop("n_slots")
        policy = self.policy = SessionPolicy(**cfg)

        bases = SlotBits.from_rng(self.rng, 1)
        codes = self.fiber.collect()
        if len(codes) != n_slots:
            raise ProtocolAbort("transmit", "fibre delivered a different number of slots")
        events = self.channel.transmit(self.channel_rng, codes, bases, n_slots)
        _send_list(chan, MessageType.BASIS_REVEAL, len(events),
                   lambda s, e: pack_bits(events.bob_basis[s:e]) + pack_u32(events.slot[s:e]))
        (alice_bases,) = _recv_list(chan, MessageType.BASIS_REVEAL, _bits)
        if len(alice_bases) != len(events):
            raise ProtocolAbort("sift", "basis reply has the wrong length")
        key = KeyBuffer(events.detector[alice_bases == events.bob_basis], Stage.SIFTED)
        res.n_detections, res.n_sifted = len(events), len(key)

        (pos,) = _recv_list(chan, MessageType.SAMPLE_INDICES, _u32)
        if len(pos) == 0 or len(pos) > len(key) or np.any(pos >= len(key)) or np.any(np.diff(pos) <= 0):
            raise ProtocolAbort("estimate", "invalid sample positions")
        mine = key.bits[pos]
        _send_list(chan, MessageType.SAMPLE_BITS, len(pos), lambda s, e: pack_bits(mine[s:e]))
        (alice_sample,) = _recv_list(chan, MessageType.SAMPLE_BITS, _bits)
        if len(alice_sample) != len(pos):
            raise ProtocolAbort("estimate", "sample reply has the wrong length")
        res.n_sampled = len(pos)
        estimate = _estimate(alice_sample, key.bits[pos])
        key = drop_positions(key, pos, 2 * len(pos))
        res.reconcile_input = key.bits.copy()
        self._check_qber(estimate, policy)

        def ask(queries: np.ndarray) -> np.ndarray:
            _send_list(chan, MessageType.PARITY_QUERY, len(queries), lambda s, e: pack_u32(queries[s:e].ravel()))
            (bits,) = _recv_list(chan, MessageType.PARITY_REPLY, _bits)
            return bits

        perms = pass_permutations(len(key), policy.cascade_passes, perm_seed)
        corrector = CascadeCorrector(key.bits, estimate, perms, policy.cascade_block_factor)
        stats = corrector.run(ask)
        chan.send(MessageType.PARITY_QUERY, b"")
        res.parity_bits = stats.leaked
        key.add_leakage(stats.leaked)
        key = key.advance(Stage.RECONCILED, corrector.bits)

        h = policy.verify_hash_bits
        vseed, _ = unpack_bits(_expect(chan, MessageType.HASH_SEED))
        alice_digest = _expect(chan, MessageType.KEY_HASH)
        key.add_leakage(h)
        if len(vseed) != len(key) + h - 1 or key_digest(key.bits, vseed, h) != alice_digest:
            raise ProtocolAbort("verify", "key digests differ after reconciliation")

        m = final_key_length(len(key), estimate, key.residual_leakage, policy.pa_safety_margin_bits)
        pa_seed = random_seed_bits(self.rng, len(key), m) if m else np.zeros(0, np.uint8)
        chan.send(MessageType.HASH_SEED, pack_bits(pa_seed))
        res.final = key.advance(Stage.FINAL, toeplitz_hash(key.bits, pa_seed, m) if m else np.zeros(0, np.uint8))
        res.leaked_bits = key.leaked_bits


# -- session driver ----------------------------------------------------------

def derive_seeds(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each party from one master seed."""
    names = ("alice", "bob", "channel", "eve")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def build_channel(link: LinkConfig, schedule: TrainSchedule, eve_rng: np.random.Generator,
                  intercept: bool = False, channel: QuantumChannel | None = None) -> QuantumChannel:
    ch = channel if channel is not None else link.channel(schedule)
    if intercept:
        ch = intercept_resend_channel(eve_rng, ch)
    return ch


@dataclass
class SessionReport:
    n_slots: int
    raw_rate_hz: float
    sifted_rate_hz: float
    qber: float
    final_rate_hz: float
    aborted_stage: str
    alice_key: np.ndarray = field(repr=False)
    bob_key: np.ndarray = field(repr=False)
    abort_reason: str = ""
    nu_eff_hz: float = 0.0
    n_detections: int = 0
    n_sifted: int = 0
    n_sampled: int = 0
    n_reconciled: int = 0
    true_qber: float = math.nan
    reconciliation_leakage: int = 0
    leaked_bits: int = 0
    audited_leakage: int = 0
    alice: EndpointResult | None = field(default=None, repr=False)
    bob: EndpointResult | None = field(default=None, repr=False)

    CSV_FIELDS = ("n_slots", "raw_rate_hz", "sifted_rate_hz", "qber", "final_rate_hz", "aborted_stage")

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]

    @property
    def completed(self) -> bool:
        return not self.aborted_stage

    @property
    def final_length(self) -> int:
        return len(self.alice_key)

    def transcript_digest(self) -> str:
        h = hashlib.sha256()
        for res in (self.alice, self.bob):
            for direction, t, payload in (res.transcript if res else []):
                h.update(f"{res.role}|{direction}|{t}|{len(payload)}|".encode())
                h.update(payload)
        return h.hexdigest()


def _socket_pairs() -> tuple[Endpoint, Endpoint, Endpoint, Endpoint]:
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    client_socks = []

    def dial():
        for _ in range(2):
            client_socks.append(socket.create_connection(("127.0.0.1", port)))

    t = threading.Thread(target=dial)
    t.start()
    server_socks = [srv.accept()[0] for _ in range(2)]
    t.join()
    srv.close()
    a_chan, a_fib = SocketEndpoint(server_socks[0]), SocketEndpoint(server_socks[1], allowed=[QUANTUM_STATES])
    b_chan, b_fib = SocketEndpoint(client_socks[0]), SocketEndpoint(client_socks[1], allowed=[QUANTUM_STATES])
    return a_chan, b_chan, SocketFiber(a_fib), SocketFiber(b_fib)


def summarize(alice: EndpointResult, bob: EndpointResult, n_slots: int, nu_eff: float) -> SessionReport:
    duration = n_slots / nu_eff if nu_eff > 0 else math.inf
    local = [r for r in (alice, bob) if r.aborted_stage and not r.remote_abort]
    aborted = local[0] if local else next((r for r in (alice, bob) if r.aborted_stage), None)
    a_key = alice.final.bits if alice.final is not None else np.zeros(0, np.uint8)
    b_key = bob.final.bits if bob.final is not None else np.zeros(0, np.uint8)
    true_qber = math.nan
    if alice.reconcile_input is not None and bob.reconcile_input is not None and len(alice.reconcile_input):
        true_qber = _estimate(alice.reconcile_input, bob.reconcile_input)
    completed = aborted is None
    return SessionReport(
        n_slots=n_slots,
        raw_rate_hz=bob.n_detections / duration,
        sifted_rate_hz=bob.n_sifted / duration,
        qber=bob.qber_estimate if not math.isnan(bob.qber_estimate) else alice.qber_estimate,
        final_rate_hz=(len(b_key) / duration) if completed else 0.0,
        aborted_stage=aborted.aborted_stage if aborted else "",
        abort_reason=aborted.abort_reason if aborted else "",
        alice_key=a_key if completed else np.zeros(0, np.uint8),
        bob_key=b_key if completed else np.zeros(0, np.uint8),
        nu_eff_hz=nu_eff,
        n_detections=bob.n_detections,
        n_sifted=bob.n_sifted,
        n_sampled=bob.n_sampled,
        n_reconciled=0 if bob.reconcile_input is None else len(bob.reconcile_input),
        true_qber=true_qber,
        reconciliation_leakage=bob.parity_bits,
        leaked_bits=bob.leaked_bits,
        audited_leakage=alice.audit_leaked + bob.audit_leaked,
        alice=alice,
        bob=bob,
    )


def endpoint_report(res: EndpointResult, n_slots: int, nu_eff: float) -> SessionReport:
    """Report from one side only, as seen by a single process."""
    duration = n_slots / nu_eff if nu_eff > 0 else math.inf
    completed = not res.aborted_stage
    key = res.final.bits if (completed and res.final is not None) else np.zeros(0, np.uint8)
    return SessionReport(
        n_slots=n_slots,
        raw_rate_hz=res.n_detections / duration,
        sifted_rate_hz=res.n_sifted / duration,
        qber=res.qber_estimate,
        final_rate_hz=len(key) / duration,
        aborted_stage=res.aborted_stage,
        abort_reason=res.abort_reason,
        alice_key=key if res.role == "alice" else np.zeros(0, np.uint8),
        bob_key=key if res.role == "bob" else np.zeros(0, np.uint8),
        nu_eff_hz=nu_eff,
        n_detections=res.n_detections,
        n_sifted=res.n_sifted,
        n_sampled=res.n_sampled,
        n_reconciled=0 if res.reconcile_input is None else len(res.reconcile_input),
        reconciliation_leakage=res.parity_bits,
        leaked_bits=res.leaked_bits,
        audited_leakage=res.audit_leaked,
        alice=res if res.role == "alice" else None,
        bob=res if res.role == "bob" else None,
    )


def run_full_session(
    policy: SessionPolicy,
    link: LinkConfig,
    schedule: TrainSchedule,
    n_slots: int,
    seed: int,
    intercept: bool = False,
    channel: QuantumChannel | None = None,
    transport: str = "memory",
) -> SessionReport:
    """prepare -> transmit -> sift -> estimate -> reconcile -> verify -> amplify.

    Alice runs in a worker thread, Bob in the caller's thread; they share
    nothing but the public channel and the simulated fibre.  Rates are per
    second of duty-cycled operation of ``schedule``.
    """
    gens = derive_seeds(seed)
    if transport == "memory":
        a_chan, b_chan = memory_pair()
        a_fiber = b_fiber = MemoryFiber()
    elif transport == "socket":
        a_chan, b_chan, a_fiber, b_fiber = _socket_pairs()
    else:
        raise ValueError(f"unknown transport {transport!r}")

    ch = build_channel(link, schedule, gens["eve"], intercept, channel)
    alice = Alice(policy, n_slots, gens["alice"], a_chan, a_fiber)
    bob = Bob(gens["bob"], b_chan, b_fiber, ch, gens["channel"])
    out: dict[str, EndpointResult] = {}
    t = threading.Thread(target=lambda: out.setdefault("alice", alice.run()), daemon=True)
    t.start()
    bob_res = bob.run()
    t.join(RECV_TIMEOUT)
    for ep in (a_chan, b_chan):
        ep.close()
    if transport == "socket":
        a_fiber.ep.close()
        b_fiber.ep.close()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapacityWarning)
        nu_eff = effective_rep_rate(schedule, link.base_nu)
    return summarize(out["alice"], bob_res, n_slots, nu_eff)
