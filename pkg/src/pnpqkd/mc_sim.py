"""Pulse-level Monte Carlo of the plug & play optical round trip.

Two independent samplers live here:

* :func:`simulate_slots` / :func:`simulate_slot` draw every random variable
  for every gate.  Slow, obvious, used as a reference.
* :class:`LinkChannel` samples only the gates where something happens, by
  drawing geometric gaps per independent click process.  Each process has
  its own sub-stream, so the events below slot ``n`` do not depend on how
  many slots are simulated in total.

Alice's states and Bob's bases are supplied as anything indexable by an
array of slot numbers: a dense ``ndarray`` or a lazy :class:`SlotBits`.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional, Protocol

import numpy as np

from .analytic import CapacityWarning, TrainSchedule, effective_rep_rate

_GEOM_BATCH = 8192
_DENSE_CHUNK = 1 << 20


class Cause(IntEnum):
    """Truth tag of an avalanche; lower value wins when several coincide."""

    PHOTON = 0
    DARK = 1
    BACKSCATTER = 2
    AFTERPULSE = 3


class Basis(IntEnum):
    Z = 0
    X = 1


def extinction_to_qberopt(extinction_db: float) -> float:
    """Misrouting probability 1 / (1 + 10^(E/10)) for an extinction ratio in dB."""
    if extinction_db < 0:
        raise ValueError("extinction ratio must be >= 0 dB")
    if math.isinf(extinction_db):
        return 0.0
    return 1.0 / (1.0 + 10.0 ** (extinction_db / 10.0))


@dataclass(frozen=True)
class OpticalConfig:
    mu: float = 0.1
    eta_t: float = 1.0
    extinction_db: float = math.inf

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not 0 <= self.eta_t <= 1:
            raise ValueError("eta_t must lie in [0, 1]")
        if self.extinction_db < 0:
            raise ValueError("extinction ratio must be >= 0 dB")

    @property
    def qber_opt(self) -> float:
        return extinction_to_qberopt(self.extinction_db)

    def photon_click_prob(self, eta_d: float) -> float:
        return -math.expm1(-self.mu * self.eta_t * eta_d)


# Shape of an InGaAs/InP APD at 173 K: noise rises much faster than efficiency.
# Passes through the (10 %, 1e-5) working point.
DEFAULT_OPERATING_CURVE: tuple[tuple[float, float], ...] = (
    (0.025, 4e-7),
    (0.05, 1.6e-6),
    (0.10, 1e-5),
    (0.15, 4e-5),
    (0.20, 1.5e-4),
)


@dataclass(frozen=True)
class DetectorModel:
    eta_d: float = 0.1
    p_noise_per_gate: float = 1e-5
    gate_width_s: float = 2e-9
    operating_curve: tuple[tuple[float, float], ...] = DEFAULT_OPERATING_CURVE
    afterpulse_prob: float = 0.0
    afterpulse_decay: float = 0.5

    def __post_init__(self):
        if not 0 <= self.eta_d <= 1:
            raise ValueError("eta_d must lie in [0, 1]")
        if not 0 <= self.p_noise_per_gate < 1:
            raise ValueError("p_noise_per_gate must lie in [0, 1)")
        if not 0 <= self.afterpulse_prob < 1:
            raise ValueError("afterpulse_prob must lie in [0, 1)")
        if not 0 <= self.afterpulse_decay < 1:
            raise ValueError("afterpulse_decay must lie in [0, 1)")
        if self.gate_width_s <= 0:
            raise ValueError("gate width must be positive")
        curve = np.asarray(self.operating_curve, dtype=float)
        if curve.ndim != 2 or curve.shape[1] != 2 or len(curve) < 2:
            raise ValueError("operating curve needs at least two (eta_d, p_noise) points")
        if np.any(np.diff(curve[:, 0]) <= 0) or np.any(np.diff(curve[:, 1]) <= 0):
            raise ValueError("operating curve must be strictly increasing in both coordinates")
        if np.any(curve[:, 1] <= 0):
            raise ValueError("operating-curve noise values must be positive")

    def noise_at(self, eta_d: float) -> float:
        """Noise probability on the operating curve, log-linear between points."""
        curve = np.asarray(self.operating_curve, dtype=float)
        if not curve[0, 0] <= eta_d <= curve[-1, 0]:
            raise ValueError(f"eta_d={eta_d} outside operating curve [{curve[0, 0]}, {curve[-1, 0]}]")
        return float(np.exp(np.interp(eta_d, curve[:, 0], np.log(curve[:, 1]))))

    def at_efficiency(self, eta_d: float) -> "DetectorModel":
        """Move the working point along the operating curve."""
        return DetectorModel(
            eta_d=eta_d,
            p_noise_per_gate=self.noise_at(eta_d),
            gate_width_s=self.gate_width_s,
            operating_curve=self.operating_curve,
            afterpulse_prob=self.afterpulse_prob,
            afterpulse_decay=self.afterpulse_decay,
        )


@dataclass(frozen=True)
class BackscatterModel:
    """Rayleigh backscatter noise from trains that overfill the storage line."""

    noise_per_overlapping_pulse: float = 0.0

    def __post_init__(self):
        if self.noise_per_overlapping_pulse < 0:
            raise ValueError("backscatter coefficient must be >= 0")

    def overfill_pulses(self, schedule: TrainSchedule) -> int:
        return schedule.overfill_pulses

    def extra_noise(self, schedule: TrainSchedule) -> float:
        return self.noise_per_overlapping_pulse * max(0, self.overfill_pulses(schedule))


def calibrate_backscatter(
    baseline_noise: float,
    schedule: TrainSchedule | None = None,
    anchor_overfill: int = 20,
) -> BackscatterModel:
    """Choose the per-pulse coefficient so that ``anchor_overfill`` extra pulses
    add as much noise per gate as ``baseline_noise``, i.e. double the
    detector-noise part of the QBER.

    ``schedule`` is accepted for symmetry with the callers; the coefficient
    does not depend on it.
    """
    if baseline_noise <= 0:
        raise ValueError("baseline noise must be positive")
    if anchor_overfill <= 0:
        raise ValueError("anchor_overfill must be positive")
    return BackscatterModel(noise_per_overlapping_pulse=baseline_noise / anchor_overfill)


class DetectionEvent(NamedTuple):
    train_idx: int
    pulse_idx: int
    detector_id: int
    bob_basis: int
    cause: int


@dataclass
class DetectionEvents:
    """Column-oriented stream of registered (single-detector) clicks."""

    slot: np.ndarray
    detector: np.ndarray
    bob_basis: np.ndarray
    cause: np.ndarray
    pulses_per_train: int = 1
    double_clicks: int = 0

    def __len__(self) -> int:
        return len(self.slot)

    @property
    def train_idx(self) -> np.ndarray:
        return self.slot // self.pulses_per_train

    @property
    def pulse_idx(self) -> np.ndarray:
        return self.slot % self.pulses_per_train

    def __iter__(self):
        for t, p, d, b, c in zip(self.train_idx, self.pulse_idx, self.detector, self.bob_basis, self.cause):
            yield DetectionEvent(int(t), int(p), int(d), int(b), int(c))

    def cause_counts(self) -> dict[Cause, int]:
        counts = np.bincount(self.cause, minlength=len(Cause))
        return {c: int(counts[c]) for c in Cause}

    def to_csv(self, fh=None) -> str:
        """Write ``train_idx,pulse_idx,detector_id,basis,cause``; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train_idx", "pulse_idx", "detector_id", "basis", "cause"])
        for ev in self:
            w.writerow([ev.train_idx, ev.pulse_idx, ev.detector_id,
                        Basis(ev.bob_basis).name, Cause(ev.cause).name.lower()])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    @classmethod
    def empty(cls, pulses_per_train: int = 1) -> "DetectionEvents":
        z = np.zeros(0, dtype=np.uint8)
        return cls(np.zeros(0, dtype=np.int64), z, z.copy(), z.copy(), pulses_per_train)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


class SlotBits:
    """Lazily evaluated i.i.d. uniform ``nbits``-bit values, one per slot."""

    def __init__(self, key: int, nbits: int = 1):
        self.key = np.uint64(key)
        self.nbits = nbits
        self._mask = np.uint64((1 << nbits) - 1)

    @classmethod
    def from_rng(cls, rng: np.random.Generator, nbits: int = 1) -> "SlotBits":
        return cls(int(rng.integers(0, 2**63)), nbits)

    def __getitem__(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.uint64)
        with np.errstate(over="ignore"):
            h = _mix64(idx * np.uint64(0x9E3779B97F4A7C15) + self.key)
        return ((h >> np.uint64(32)) & self._mask).astype(np.uint8)


class QuantumChannel(Protocol):
    def transmit(self, rng: np.random.Generator, alice_codes, bob_bases, n_slots: int) -> DetectionEvents:
        ...


def _bernoulli_positions(rng: np.random.Generator, p: float, n: int) -> np.ndarray:
    """Sorted indices < n of successes of i.i.d. Bernoulli(p) trials."""
    if n <= 0 or p <= 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    chunks = []
    last = -1
    while True:
        # gaps saturate at int64 max for tiny p; anything past n is equivalent
        gaps = np.minimum(rng.geometric(p, size=_GEOM_BATCH), n + 1)
        pos = last + np.cumsum(gaps)
        if pos[-1] >= n:
            chunks.append(pos[pos < n])
            break
        chunks.append(pos)
        last = int(pos[-1])
    return np.concatenate(chunks).astype(np.int64)


def _route(alice_codes: np.ndarray, bob_basis: np.ndarray, u: np.ndarray, qber_opt: float) -> np.ndarray:
    a_basis = alice_codes >> 1
    a_bit = alice_codes & 1
    wrong = (u < qber_opt).astype(np.uint8)
    random_det = (u < 0.5).astype(np.uint8)
    return np.where(a_basis == bob_basis, a_bit ^ wrong, random_det).astype(np.uint8)


@dataclass
class LinkChannel:
    """Sparse sampler for the lossy link plus two gated detectors."""

    optical: OpticalConfig
    detector: DetectorModel
    extra_noise: float = 0.0
    pulses_per_train: int = 1

    def transmit(self, rng: np.random.Generator, alice_codes, bob_bases, n_slots: int) -> DetectionEvents:
        s_photon, s_dark0, s_dark1, s_bs0, s_bs1, s_route, s_after = rng.spawn(7)
        p_phot = self.optical.photon_click_prob(self.detector.eta_d)
        p_noise = self.detector.p_noise_per_gate

        ph = _bernoulli_positions(s_photon, p_phot, n_slots)
        ph_det = _route(np.asarray(alice_codes[ph], dtype=np.uint8), np.asarray(bob_bases[ph], dtype=np.uint8),
                        s_route.random(len(ph)), self.optical.qber_opt)

        parts = [(ph, ph_det, Cause.PHOTON)]
        for stream, det, cause, p in (
            (s_dark0, 0, Cause.DARK, p_noise),
            (s_dark1, 1, Cause.DARK, p_noise),
            (s_bs0, 0, Cause.BACKSCATTER, self.extra_noise),
            (s_bs1, 1, Cause.BACKSCATTER, self.extra_noise),
        ):
            pos = _bernoulli_positions(stream, p, n_slots)
            parts.append((pos, np.full(len(pos), det, dtype=np.uint8), cause))

        slots = np.concatenate([p[0] for p in parts])
        dets = np.concatenate([p[1] for p in parts])
        causes = np.concatenate([np.full(len(p[0]), p[2], dtype=np.uint8) for p in parts])

        if self.detector.afterpulse_prob > 0:
            slots, dets, causes = self._add_afterpulses(s_after, slots, dets, causes, n_slots)

        return _resolve(slots, dets, causes, bob_bases, self.pulses_per_train)

    def _add_afterpulses(self, rng, slots, dets, causes, n_slots):
        ap = self.detector.afterpulse_prob
        p_release = 1.0 - self.detector.afterpulse_decay
        all_s, all_d, all_c = [slots], [dets], [causes]
        gen_s, gen_d = slots, dets
        while len(gen_s):
            fire = rng.random(len(gen_s)) < ap
            delay = rng.geometric(p_release, size=int(fire.sum()))
            new_s = gen_s[fire] + delay
            keep = new_s < n_slots
            gen_s, gen_d = new_s[keep], gen_d[fire][keep]
            all_s.append(gen_s)
            all_d.append(gen_d)
            all_c.append(np.full(len(gen_s), Cause.AFTERPULSE, dtype=np.uint8))
        return np.concatenate(all_s), np.concatenate(all_d), np.concatenate(all_c)


def _resolve(slots, dets, causes, bob_bases, pulses_per_train) -> DetectionEvents:
    """Merge avalanches into at most one event per gate; drop double clicks."""
    if len(slots) == 0:
        return DetectionEvents.empty(pulses_per_train)
    key = slots.astype(np.int64) * 2 + dets
    order = np.lexsort((causes, key))
    key, causes = key[order], causes[order]
    first = np.ones(len(key), dtype=bool)
    first[1:] = key[1:] != key[:-1]
    key, causes = key[first], causes[first]
    slot = key // 2
    det = (key % 2).astype(np.uint8)
    both = np.zeros(len(slot), dtype=bool)
    same = slot[1:] == slot[:-1]
    both[1:] |= same
    both[:-1] |= same
    single = ~both
    slot, det, causes = slot[single], det[single], causes[single]
    return DetectionEvents(
        slot=slot,
        detector=det,
        bob_basis=np.asarray(bob_bases[slot], dtype=np.uint8),
        cause=causes.astype(np.uint8),
        pulses_per_train=pulses_per_train,
        double_clicks=int(np.count_nonzero(same)),
    )


def simulate_slot(
    rng: np.random.Generator,
    optical: OpticalConfig,
    detector: DetectorModel,
    extra_noise: float,
    alice_state: int,
    bob_basis: int,
    slot_idx: int = 0,
    pulses_per_train: int = 1,
) -> Optional[DetectionEvent]:
    """One gate, drawn the slow way.  ``alice_state`` is ``basis << 1 | bit``."""
    u = rng.random(6)
    p_phot = optical.photon_click_prob(detector.eta_d)
    fired = [None, None]  # best cause per detector
    if u[0] < p_phot:
        a_basis, a_bit = alice_state >> 1, alice_state & 1
        if a_basis == bob_basis:
            d = a_bit ^ int(u[1] < optical.qber_opt)
        else:
            d = int(u[1] < 0.5)
        fired[d] = Cause.PHOTON
    for d in (0, 1):
        if fired[d] is None and u[2 + d] < detector.p_noise_per_gate:
            fired[d] = Cause.DARK
        if fired[d] is None and u[4 + d] < extra_noise:
            fired[d] = Cause.BACKSCATTER
    hits = [d for d in (0, 1) if fired[d] is not None]
    if len(hits) != 1:
        return None
    d = hits[0]
    return DetectionEvent(slot_idx // pulses_per_train, slot_idx % pulses_per_train, d, int(bob_basis), int(fired[d]))


def simulate_slots(
    rng: np.random.Generator,
    optical: OpticalConfig,
    detector: DetectorModel,
    extra_noise: float,
    alice_codes: np.ndarray,
    bob_bases: np.ndarray,
    pulses_per_train: int = 1,
) -> DetectionEvents:
    """Dense reference sampler: six uniforms per gate, no afterpulsing."""
    if detector.afterpulse_prob > 0:
        raise ValueError("the dense reference sampler does not model afterpulses")
    alice_codes = np.asarray(alice_codes, dtype=np.uint8)
    bob_bases = np.asarray(bob_bases, dtype=np.uint8)
    n = len(alice_codes)
    p_phot = optical.photon_click_prob(detector.eta_d)
    out_s, out_d, out_c = [], [], []
    n_double = 0
    for start in range(0, n, _DENSE_CHUNK):
        stop = min(n, start + _DENSE_CHUNK)
        m = stop - start
        u = rng.random((m, 6))
        a = alice_codes[start:stop]
        b = bob_bases[start:stop]
        photon = u[:, 0] < p_phot
        matched = (a >> 1) == b
        ph_det = np.where(matched, (a & 1) ^ (u[:, 1] < optical.qber_opt), u[:, 1] < 0.5).astype(np.uint8)
        cause = np.full((m, 2), 255, dtype=np.uint8)
        for d in (0, 1):
            col = cause[:, d]
            col[photon & (ph_det == d)] = Cause.PHOTON
            col[(col == 255) & (u[:, 2 + d] < detector.p_noise_per_gate)] = Cause.DARK
            col[(col == 255) & (u[:, 4 + d] < extra_noise)] = Cause.BACKSCATTER
        hit0, hit1 = cause[:, 0] != 255, cause[:, 1] != 255
        n_double += int(np.count_nonzero(hit0 & hit1))
        single = hit0 ^ hit1
        idx = np.flatnonzero(single)
        det = hit1[idx].astype(np.uint8)
        out_s.append(idx + start)
        out_d.append(det)
        out_c.append(cause[idx, det])
    if not out_s:
        return DetectionEvents.empty(pulses_per_train)
    slot = np.concatenate(out_s).astype(np.int64)
    return DetectionEvents(
        slot=slot,
        detector=np.concatenate(out_d),
        bob_basis=bob_bases[slot],
        cause=np.concatenate(out_c),
        pulses_per_train=pulses_per_train,
        double_clicks=n_double,
    )


@dataclass
class IdealChannel:
    """Lossless, noiseless link with a perfect detector: every gate clicks."""

    pulses_per_train: int = 1

    def transmit(self, rng: np.random.Generator, alice_codes, bob_bases, n_slots: int) -> DetectionEvents:
        slot = np.arange(n_slots, dtype=np.int64)
        a = np.asarray(alice_codes[slot], dtype=np.uint8)
        b = np.asarray(bob_bases[slot], dtype=np.uint8)
        det = _route(a, b, rng.random(n_slots), 0.0)
        return DetectionEvents(slot, det, b, np.zeros(n_slots, dtype=np.uint8), self.pulses_per_train)


class _ResentStates:
    def __init__(self, alice_codes, eve_basis: SlotBits, eve_bit: SlotBits, follow_alice: bool):
        self.alice_codes = alice_codes
        self.eve_basis = eve_basis
        self.eve_bit = eve_bit
        self.follow_alice = follow_alice

    def __getitem__(self, idx):
        a = np.asarray(self.alice_codes[idx], dtype=np.uint8)
        a_basis = a >> 1
        e_basis = a_basis if self.follow_alice else self.eve_basis[idx]
        same = e_basis == a_basis
        bit = np.where(same, a & 1, self.eve_bit[idx]).astype(np.uint8)
        return ((e_basis << 1) | bit).astype(np.uint8)


@dataclass
class InterceptResend:
    """Eve measures every pulse in a basis of her choice and re-emits the result."""

    inner: QuantumChannel
    eve_basis: SlotBits
    eve_bit: SlotBits
    follow_alice: bool = False

    def transmit(self, rng: np.random.Generator, alice_codes, bob_bases, n_slots: int) -> DetectionEvents:
        resent = _ResentStates(alice_codes, self.eve_basis, self.eve_bit, self.follow_alice)
        return self.inner.transmit(rng, resent, bob_bases, n_slots)


def intercept_resend_channel(rng: np.random.Generator, inner_channel: QuantumChannel,
                             follow_alice: bool = False) -> InterceptResend:
    """Wrap ``inner_channel`` with an intercept-resend attacker.

    With ``follow_alice`` Eve always measures in Alice's basis (a
    non-disturbing oracle attacker, used as a control).
    """
    return InterceptResend(inner_channel, SlotBits.from_rng(rng, 1), SlotBits.from_rng(rng, 1), follow_alice)


@dataclass(frozen=True)
class LinkConfig:
    optical: OpticalConfig = field(default_factory=OpticalConfig)
    detector: DetectorModel = field(default_factory=DetectorModel)
    backscatter: BackscatterModel = field(default_factory=BackscatterModel)
    base_nu: float = 2.5e6

    def channel(self, schedule: TrainSchedule) -> LinkChannel:
        return LinkChannel(self.optical, self.detector, self.backscatter.extra_noise(schedule),
                           schedule.pulses_per_train)


@dataclass(frozen=True)
class QberReport:
    n_slots: int
    detections: int
    sifted: int
    errors: int
    double_clicks: int
    nu_eff_hz: float
    raw_rate_hz: float
    detection_rate_hz: float
    qber: float
    qber_detector: float
    qber_optical: float
    qber_backscatter: float
    qber_afterpulse: float
    overfill_pulses: int
    capacity_ok: bool
    cause_counts: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def qber_stderr(self) -> float:
        if self.sifted == 0:
            return math.nan
        return math.sqrt(self.qber * (1 - self.qber) / self.sifted)

    CSV_FIELDS = (
        "n_slots", "detections", "sifted", "errors", "double_clicks", "nu_eff_hz", "raw_rate_hz",
        "detection_rate_hz", "qber", "qber_detector", "qber_optical", "qber_backscatter",
        "qber_afterpulse", "overfill_pulses", "capacity_ok",
    )

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def session_events(
    config: LinkConfig,
    schedule: TrainSchedule,
    n_trains: int,
    rng_seed: int,
    intercept: bool = False,
) -> tuple[SlotBits, DetectionEvents]:
    """Alice's lazily generated states and Bob's clicks for ``n_trains`` trains."""
    if n_trains < 1:
        raise ValueError("n_trains must be >= 1")
    rng = np.random.default_rng(rng_seed)
    r_states, r_channel, r_eve = rng.spawn(3)
    alice = SlotBits.from_rng(r_states, 2)
    bob = SlotBits.from_rng(r_states, 1)
    channel: QuantumChannel = config.channel(schedule)
    if intercept:
        channel = intercept_resend_channel(r_eve, channel)
    n_slots = n_trains * schedule.pulses_per_train
    return alice, channel.transmit(r_channel, alice, bob, n_slots)


def run_session(
    config: LinkConfig,
    schedule: TrainSchedule,
    n_trains: int,
    rng_seed: int,
    intercept: bool = False,
) -> QberReport:
    """Simulate ``n_trains`` trains and summarise the basis-matched clicks.

    ``raw_rate_hz`` counts basis-matched detections per second of
    duty-cycled operation; ``detection_rate_hz`` counts all registered clicks.
    """
    alice, events = session_events(config, schedule, n_trains, rng_seed, intercept)
    n_slots = n_trains * schedule.pulses_per_train

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapacityWarning)
        nu_eff = effective_rep_rate(schedule, config.base_nu)
    duration = n_slots / nu_eff

    a = alice[events.slot]
    matched = (a >> 1) == events.bob_basis
    err = matched & ((a & 1) != events.detector)
    sifted = int(matched.sum())
    n_err = int(err.sum())

    def frac(cause: Cause) -> float:
        return float(np.count_nonzero(err & (events.cause == cause))) / sifted if sifted else math.nan

    qber = n_err / sifted if sifted else math.nan
    counts = events.cause_counts()
    return QberReport(
        n_slots=n_slots,
        detections=len(events),
        sifted=sifted,
        errors=n_err,
        double_clicks=events.double_clicks,
        nu_eff_hz=nu_eff,
        raw_rate_hz=sifted / duration,
        detection_rate_hz=len(events) / duration,
        qber=qber,
        qber_detector=frac(Cause.DARK),
        qber_optical=frac(Cause.PHOTON),
        qber_backscatter=frac(Cause.BACKSCATTER),
        qber_afterpulse=frac(Cause.AFTERPULSE),
        overfill_pulses=schedule.overfill_pulses,
        capacity_ok=schedule.fits_storage,
        cause_counts=tuple(counts[c] for c in Cause),
    )
