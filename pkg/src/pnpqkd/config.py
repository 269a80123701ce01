"""Flat ``key = value`` experiment configuration.

Sections and keys::

    [link]        mu nu q protocol fiber_loss_db_per_km length_km bob_loss_db
                  eta_t (overrides the loss budget) extinction_db qber_opt
    [detector]    eta_d p_noise gate_width_s operating_curve afterpulse_prob afterpulse_decay
    [train]       pulses_per_train pulse_spacing_s storage_line_km group_velocity_m_per_s line_length_km
    [protocol]    mu sample_fraction cascade_passes cascade_block_factor pa_safety_margin_bits
                  verify_hash_bits abort_qber n_slots sessions
    [backscatter] noise_per_overlapping_pulse calibrate anchor_overfill
    [alignment]   guess_km true_distance_km parasites scenes max_offset_km
    [reproduce]   free-form numeric reference values and tolerances

``operating_curve`` is written ``eta:p, eta:p, ...``; ``parasites`` is
``delay_us:amplitude, ...``.  Unknown sections or keys raise
:class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .alignment import GROUP_VELOCITY, ReflectionScene, round_trip_delay
from .analytic import CapacityWarning, LinkBudget, TrainSchedule, effective_rep_rate, transfer_efficiency
from .mc_sim import (
    DEFAULT_OPERATING_CURVE,
    BackscatterModel,
    DetectorModel,
    LinkConfig,
    OpticalConfig,
    calibrate_backscatter,
    extinction_to_qberopt,
)
from .protocol.keys import SessionPolicy


class ConfigError(ValueError):
    pass


def _curve(text: str) -> tuple[tuple[float, float], ...]:
    pts = []
    for item in text.split(","):
        if item.strip():
            eta, _, p = item.partition(":")
            pts.append((float(eta), float(p)))
    return tuple(pts)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass
class LinkSection:
    mu: float = 0.1
    nu: float = 2.5e6
    q: float = 0.5
    protocol: str = "BB84"
    fiber_loss_db_per_km: float = 0.0
    length_km: float = 0.0
    bob_loss_db: float = 0.0
    eta_t: float | None = None
    extinction_db: float = math.inf
    qber_opt: float | None = None


@dataclass
class DetectorSection:
    eta_d: float = 0.1
    p_noise: float = 1e-5
    gate_width_s: float = 2e-9
    operating_curve: tuple = DEFAULT_OPERATING_CURVE
    afterpulse_prob: float = 0.0
    afterpulse_decay: float = 0.5


@dataclass
class TrainSection:
    pulses_per_train: int | None = None  # None: fill the storage line exactly
    pulse_spacing_s: float = 400e-9
    storage_line_km: float = 7.8
    group_velocity_m_per_s: float = 2.04e8
    line_length_km: float | None = None  # None: same as [link] length_km


@dataclass
class ProtocolSection:
    mu: float | None = None
    sample_fraction: float = 0.5
    cascade_passes: int = 4
    cascade_block_factor: float = 0.73
    pa_safety_margin_bits: int = 64
    verify_hash_bits: int = 64
    abort_qber: float | None = None
    n_slots: int = 10_000_000
    sessions: int = 1


@dataclass
class BackscatterSection:
    noise_per_overlapping_pulse: float = 0.0
    calibrate: bool = False
    anchor_overfill: int = 20


@dataclass
class AlignmentSection:
    guess_km: float | None = None
    true_distance_km: float | None = None
    parasites: tuple = ()
    scenes: int = 1000
    max_offset_km: float = 4.9


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else _int(text)


# field annotations are strings here (postponed evaluation)
_PARSERS = {
    "float": float,
    "int": _int,
    "str": str.strip,
    "bool": _bool,
    "float | None": _opt_float,
    "int | None": _opt_int,
}

_SECTIONS = {
    "link": LinkSection,
    "detector": DetectorSection,
    "train": TrainSection,
    "protocol": ProtocolSection,
    "backscatter": BackscatterSection,
    "alignment": AlignmentSection,
}

_TUPLE_KEYS = {"operating_curve": _curve, "parasites": _curve}


def _parse_section(cls, items: dict[str, str], name: str):
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            parser = _TUPLE_KEYS.get(key) or _PARSERS[known[key].type]
            kw[key] = parser(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r} in [{name}]: {raw!r} ({exc})") from None
    return cls(**kw)


@dataclass
class ExperimentConfig:
    link: LinkSection = field(default_factory=LinkSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    train: TrainSection = field(default_factory=TrainSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    backscatter: BackscatterSection = field(default_factory=BackscatterSection)
    alignment: AlignmentSection = field(default_factory=AlignmentSection)
    reproduce: dict[str, float] = field(default_factory=dict)
    source: str = ""

    # -- loading --------------------------------------------------------------

    @classmethod
    def from_string(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        parts = {}
        for name in cp.sections():
            items = dict(cp.items(name))
            if name == "reproduce":
                try:
                    parts[name] = {k: float(v) for k, v in items.items()}
                except ValueError as exc:
                    raise ConfigError(f"[reproduce] values must be numbers ({exc})") from None
            elif name in _SECTIONS:
                parts[name] = _parse_section(_SECTIONS[name], items, name)
            else:
                raise ConfigError(f"unknown section [{name}]")
        return cls(**parts, source=source)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_string(path.read_text(), source=str(path))

    @classmethod
    def bundled(cls, name: str) -> "ExperimentConfig":
        fname = name if name.endswith(".ini") else f"{name}.ini"
        ref = resources.files("pnpqkd.configs").joinpath(fname)
        if not ref.is_file():
            raise ConfigError(f"no bundled config named {name!r}")
        return cls.from_string(ref.read_text(), source=f"bundled:{fname}")

    # -- derived objects --------------------------------------------------------

    @property
    def eta_t(self) -> float:
        if self.link.eta_t is not None:
            return self.link.eta_t
        return transfer_efficiency(self.link.fiber_loss_db_per_km, self.link.length_km, self.link.bob_loss_db)

    @property
    def qber_opt(self) -> float:
        if self.link.qber_opt is not None:
            return self.link.qber_opt
        return extinction_to_qberopt(self.link.extinction_db)

    @property
    def mu(self) -> float:
        return self.protocol.mu if self.protocol.mu is not None else self.link.mu

    def link_budget(self) -> LinkBudget:
        lk = self.link
        return LinkBudget(
            mu=self.mu, nu=lk.nu, eta_d=self.detector.eta_d,
            fiber_loss_db_per_km=lk.fiber_loss_db_per_km, length_km=lk.length_km,
            bob_loss_db=lk.bob_loss_db, p_noise=self.detector.p_noise,
            qber_opt=self.qber_opt, protocol=lk.protocol, q=lk.q,
        )

    def optical(self) -> OpticalConfig:
        if self.link.qber_opt is not None:
            ext = math.inf if self.link.qber_opt == 0 else 10 * math.log10(1 / self.link.qber_opt - 1)
        else:
            ext = self.link.extinction_db
        return OpticalConfig(mu=self.mu, eta_t=self.eta_t, extinction_db=ext)

    def detector_model(self) -> DetectorModel:
        d = self.detector
        return DetectorModel(
            eta_d=d.eta_d, p_noise_per_gate=d.p_noise, gate_width_s=d.gate_width_s,
            operating_curve=d.operating_curve, afterpulse_prob=d.afterpulse_prob,
            afterpulse_decay=d.afterpulse_decay,
        )

    def schedule(self, pulses_per_train: int | None = None) -> TrainSchedule:
        t = self.train
        line = t.line_length_km if t.line_length_km is not None else self.link.length_km
        base = TrainSchedule(1, t.pulse_spacing_s, t.storage_line_km, t.group_velocity_m_per_s, line)
        n = pulses_per_train or t.pulses_per_train or base.capacity_pulses
        return TrainSchedule(n, t.pulse_spacing_s, t.storage_line_km, t.group_velocity_m_per_s, line)

    def backscatter_model(self) -> BackscatterModel:
        b = self.backscatter
        if b.calibrate:
            return calibrate_backscatter(self.detector.p_noise, anchor_overfill=b.anchor_overfill)
        return BackscatterModel(b.noise_per_overlapping_pulse)

    def link_config(self) -> LinkConfig:
        return LinkConfig(self.optical(), self.detector_model(), self.backscatter_model(), self.link.nu)

    def policy(self) -> SessionPolicy:
        p = self.protocol
        return SessionPolicy(
            mu=self.mu, sample_fraction=p.sample_fraction, cascade_passes=p.cascade_passes,
            cascade_block_factor=p.cascade_block_factor, pa_safety_margin_bits=p.pa_safety_margin_bits,
            verify_hash_bits=p.verify_hash_bits, abort_qber=p.abort_qber,
        )

    def nu_effective(self, schedule: TrainSchedule | None = None) -> float:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CapacityWarning)
            return effective_rep_rate(schedule or self.schedule(), self.link.nu)

    def scene(self) -> ReflectionScene:
        a = self.alignment
        dist = a.true_distance_km if a.true_distance_km is not None else self.schedule().line_length_km
        parasites = tuple((d * 1e-6, amp) for d, amp in a.parasites)
        return ReflectionScene(round_trip_delay(dist, self.train.group_velocity_m_per_s or GROUP_VELOCITY),
                               parasites)

    @property
    def guess_km(self) -> float:
        a = self.alignment
        return a.guess_km if a.guess_km is not None else self.schedule().line_length_km

    def ref(self, key: str, default: float | None = None) -> float:
        if key in self.reproduce:
            return self.reproduce[key]
        if default is None:
            raise ConfigError(f"[reproduce] {key} missing in {self.source}")
        return default
