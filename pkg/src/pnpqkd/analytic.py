"""Closed-form link budget, QBER and key-distillation estimates.

Everything here is a pure function of its arguments.  The Monte Carlo
simulator in :mod:`pnpqkd.mc_sim` is validated against these expressions.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

from scipy.optimize import brentq

BB84_Q = 0.5


class NoSignalError(ValueError):
    """Raised when the photon detection probability is zero."""


class DistillationImpossible(ValueError):
    """Raised when error correction plus privacy amplification leaves no key."""


class ChannelUnusable(ValueError):
    """Raised when the total QBER exceeds 1/2."""


class CapacityWarning(UserWarning):
    """A pulse train is longer than the storage line can hold."""


def _check_prob(name: str, value: float, lo: float = 0.0, hi: float = 1.0, hi_open: bool = False) -> None:
    if not (lo <= value <= hi) or (hi_open and value >= hi):
        bracket = ")" if hi_open else "]"
        raise ValueError(f"{name}={value!r} outside [{lo}, {hi}{bracket}")


@dataclass(frozen=True)
class LinkBudget:
    """All parameters entering the raw-rate and QBER expressions.

    Units: ``nu`` in Hz, ``fiber_loss_db_per_km`` in dB/km, ``length_km``
    in km, ``bob_loss_db`` in dB.  ``p_noise`` is per detector gate.
    """

    mu: float = 0.1
    nu: float = 2.5e6
    eta_d: float = 0.1
    fiber_loss_db_per_km: float = 0.0
    length_km: float = 0.0
    bob_loss_db: float = 0.0
    p_noise: float = 1e-5
    qber_opt: float = 0.0
    protocol: str = "BB84"
    q: float = BB84_Q

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.nu < 0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")
        _check_prob("q", self.q)
        if self.q == 0:
            raise ValueError("q must be in (0, 1]")
        _check_prob("eta_d", self.eta_d)
        _check_prob("p_noise", self.p_noise, hi_open=True)
        _check_prob("qber_opt", self.qber_opt, hi=0.5)
        if self.protocol.upper() == "BB84" and self.q != BB84_Q:
            raise ValueError("BB84 fixes q = 1/2")
        for name in ("fiber_loss_db_per_km", "length_km", "bob_loss_db"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def eta_t(self) -> float:
        return transfer_efficiency(self.fiber_loss_db_per_km, self.length_km, self.bob_loss_db)

    @property
    def p_nonempty(self) -> float:
        """Probability that a pulse holds at least one photon, 1 - exp(-mu)."""
        return -math.expm1(-self.mu)


@dataclass(frozen=True)
class DistillationEstimate:
    r_ec: float
    r_pa: float
    useful_rate_hz: float


@dataclass(frozen=True)
class ExperimentRecord:
    label: str
    distance_km: float
    mu: float
    raw_rate_hz: float
    qber: float

    def __post_init__(self):
        if self.raw_rate_hz < 0:
            raise ValueError("raw_rate_hz must be >= 0")
        _check_prob("qber", self.qber, hi=0.5)


@dataclass(frozen=True)
class TrainSchedule:
    """Bob's pulse-train timing and the fibre lengths it runs over."""

    pulses_per_train: int
    pulse_spacing_s: float = 400e-9
    storage_line_km: float = 7.8
    group_velocity_m_per_s: float = 2.04e8
    line_length_km: float = 22.8

    def __post_init__(self):
        if self.pulses_per_train < 1:
            raise ValueError("pulses_per_train must be >= 1")
        if self.pulse_spacing_s <= 0 or self.group_velocity_m_per_s <= 0:
            raise ValueError("pulse spacing and group velocity must be positive")
        if self.storage_line_km < 0 or self.line_length_km < 0:
            raise ValueError("fibre lengths must be >= 0")

    @property
    def train_duration_s(self) -> float:
        return self.pulses_per_train * self.pulse_spacing_s

    @property
    def round_trip_s(self) -> float:
        return 2.0 * (self.line_length_km + self.storage_line_km) * 1e3 / self.group_velocity_m_per_s

    @property
    def train_extent_m(self) -> float:
        return self.train_duration_s * self.group_velocity_m_per_s

    @property
    def capacity_pulses(self) -> int:
        """Largest train that still fits in twice the storage-line length."""
        pulse_len_m = self.pulse_spacing_s * self.group_velocity_m_per_s
        return int(math.floor(2.0 * self.storage_line_km * 1e3 / pulse_len_m + 1e-9))

    @property
    def overfill_pulses(self) -> int:
        return max(0, self.pulses_per_train - self.capacity_pulses)

    @property
    def fits_storage(self) -> bool:
        return self.pulses_per_train <= self.capacity_pulses


def transfer_efficiency(fiber_loss_db_per_km: float, length_km: float, bob_loss_db: float) -> float:
    if fiber_loss_db_per_km < 0 or length_km < 0 or bob_loss_db < 0:
        raise ValueError("losses and length must be non-negative")
    return 10.0 ** (-(fiber_loss_db_per_km * length_km + bob_loss_db) / 10.0)


def raw_rate(budget: LinkBudget, nu_effective: float, eta_t: float | None = None) -> float:
    """q * mu * nu_eff * eta_t * eta_d.

    ``eta_t`` defaults to the budget's own transfer efficiency; pass it
    explicitly to use a back-solved value.
    """
    if nu_effective < 0:
        raise ValueError("nu_effective must be >= 0")
    if eta_t is None:
        eta_t = budget.eta_t
    return budget.q * budget.mu * nu_effective * eta_t * budget.eta_d


def photon_click_probability(mu: float, eta_t: float, eta_d: float) -> float:
    """Thinned-Poisson probability that a pulse yields a photon click."""
    return -math.expm1(-mu * eta_t * eta_d)


def detection_probability(mu: float, eta_t: float, eta_d: float, p_noise: float) -> float:
    """Per-gate probability of any count with two detectors (p_phot + 2 p_noise)."""
    return photon_click_probability(mu, eta_t, eta_d) + 2.0 * p_noise


def qber_det(p_noise: float, mu: float, eta_d: float, eta_t: float) -> float:
    denom = mu * eta_d * eta_t
    if denom <= 0:
        raise NoSignalError("mu * eta_d * eta_t is zero: no photon signal")
    return p_noise / denom


def qber_ratio(p_noise: float, p_phot: float, qber_opt: float) -> float:
    """Error fraction before the small-noise approximation.

    ``(qber_opt * p_phot + p_noise) / (p_phot + 2 p_noise)``; this is what a
    two-detector simulation converges to.
    """
    denom = p_phot + 2.0 * p_noise
    if denom <= 0:
        raise NoSignalError("no detections possible")
    return (qber_opt * p_phot + p_noise) / denom


def qber_total(qber_det: float, qber_opt: float, extra_noise_qber: float = 0.0) -> float:
    if min(qber_det, qber_opt, extra_noise_qber) < 0:
        raise ValueError("QBER components must be non-negative")
    total = qber_det + qber_opt + extra_noise_qber
    if total > 0.5:
        raise ChannelUnusable(f"total QBER {total:.4f} exceeds 0.5")
    return total


def ec_fraction(qber: float) -> float:
    """Fraction of bits spent on error correction, (7/2) Q - Q log2 Q.

    Meant for small QBER.  The value is returned even when it reaches 1;
    :func:`distillation_yield` is where that becomes an error.
    """
    _check_prob("qber", qber, hi=0.5, hi_open=True)
    if qber == 0:
        return 0.0
    return 3.5 * qber - qber * math.log2(qber)


def pa_fraction(qber: float) -> float:
    _check_prob("qber", qber, hi=0.5)
    return 1.0 + math.log2((1.0 + 4.0 * qber - 4.0 * qber * qber) / 2.0)


def distillation_yield(qber: float) -> float:
    """(1 - R_ec)(1 - R_pa); raises DistillationImpossible when <= 0."""
    y = (1.0 - ec_fraction(qber)) * (1.0 - pa_fraction(qber))
    if y <= 0:
        raise DistillationImpossible(f"no key can be distilled at QBER {qber:.4f}")
    return y


def distillation_threshold() -> float:
    """QBER at which the error-correction cost reaches 100 %."""
    return brentq(lambda q: ec_fraction(q) - 1.0, 0.05, 0.3, xtol=1e-14)


def useful_rate(raw_rate_hz: float, qber: float) -> float:
    return raw_rate_hz * distillation_yield(qber)


def distillation_estimate(raw_rate_hz: float, qber: float) -> DistillationEstimate:
    return DistillationEstimate(
        r_ec=ec_fraction(qber),
        r_pa=pa_fraction(qber),
        useful_rate_hz=useful_rate(raw_rate_hz, qber),
    )


def scale_experiment(record: ExperimentRecord, target_mu: float = 0.1) -> ExperimentRecord:
    """Rescale a published (raw rate, QBER) pair to another mean photon number.

    All of the measured QBER is treated as detector noise, so it scales as
    1/mu while the raw rate scales as mu.
    """
    if record.mu <= 0 or target_mu <= 0:
        raise ValueError("mean photon numbers must be positive")
    if target_mu == record.mu:
        return record
    factor = target_mu / record.mu
    return replace(
        record,
        label=f"{record.label} (scaled to mu={target_mu:g})",
        mu=target_mu,
        raw_rate_hz=record.raw_rate_hz * factor,
        qber=min(0.5, record.qber / factor),
    )


def effective_rep_rate(schedule: TrainSchedule, base_nu: float) -> float:
    """Duty-cycled repetition frequency of train-based operation.

    Bob emits a train, then waits for it to come back through the line and
    the storage line before emitting the next one::

        nu_eff = T_train / (T_train + T_rt) * base_nu

    Emits :class:`CapacityWarning` when the train overfills the storage line;
    the value is still returned.
    """
    if base_nu < 0:
        raise ValueError("base_nu must be >= 0")
    if not schedule.fits_storage:
        warnings.warn(
            f"train of {schedule.pulses_per_train} pulses exceeds storage capacity "
            f"of {schedule.capacity_pulses}",
            CapacityWarning,
            stacklevel=2,
        )
    t_train = schedule.train_duration_s
    return t_train / (t_train + schedule.round_trip_s) * base_nu
