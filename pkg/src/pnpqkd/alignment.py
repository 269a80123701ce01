"""Photon-counting OTDR alignment: find the round-trip delay of the far mirror.

A coarse scan steps the detector gate over the delays that correspond to the
operator's distance guess plus or minus a few kilometres, in 1 ns steps, and
keeps the strongest response.  A fine scan then steps 100 ps across the 2 ns
around that candidate and returns the centre of the peak.

Times are handled internally as integer picoseconds so that grid points are
exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GROUP_VELOCITY = 2.04e8  # m/s
COARSE_STEP_S = 1e-9
FINE_STEP_S = 100e-12
FINE_WINDOW_S = 2e-9
WINDOW_KM = 5.0
_PS = 1e12
_EDGE_PS = 1e-3  # keeps points exactly one step away outside a peak


class AlignmentError(ValueError):
    pass


class MirrorNotFound(AlignmentError):
    pass


class AlignmentFailed(AlignmentError):
    pass


@dataclass(frozen=True)
class ReflectionScene:
    true_delay_s: float
    parasite_reflections: tuple[tuple[float, float], ...] = ()
    mirror_amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "parasite_reflections",
                           tuple((float(d), float(a)) for d, a in self.parasite_reflections))
        if self.true_delay_s < 0 or self.mirror_amplitude <= 0:
            raise ValueError("mirror needs a non-negative delay and positive amplitude")
        for _, amp in self.parasite_reflections:
            if amp < 0 or 10 * amp > self.mirror_amplitude:
                raise ValueError("parasitic reflections must be at least 10x weaker than the mirror")

    def reflections(self) -> list[tuple[float, float]]:
        return [(self.true_delay_s, self.mirror_amplitude), *self.parasite_reflections]

    @classmethod
    def at_distance(cls, distance_km: float, velocity: float = GROUP_VELOCITY, **kw) -> "ReflectionScene":
        return cls(round_trip_delay(distance_km, velocity), **kw)


@dataclass(frozen=True)
class AlignmentResult:
    estimated_delay_s: float
    coarse_steps: int
    fine_steps: int
    coarse_candidate_s: float = math.nan
    duration_s: float = 0.0

    def error_s(self, scene: ReflectionScene) -> float:
        return self.estimated_delay_s - scene.true_delay_s

    def report(self, scene: ReflectionScene | None = None) -> str:
        line = (f"delay={self.estimated_delay_s * 1e6:.6f} us coarse_steps={self.coarse_steps} "
                f"fine_steps={self.fine_steps} scan_time={self.duration_s:.1f} s")
        if scene is not None:
            line += f" error={self.error_s(scene) * 1e12:+.1f} ps"
        return line


@dataclass
class ScanNoise:
    """Optional Poisson count noise: ``counts_per_unit`` counts per unit amplitude per dwell."""

    rng: np.random.Generator
    counts_per_unit: float = 1000.0
    background: float = 0.0

    def apply(self, response: np.ndarray) -> np.ndarray:
        mean = response * self.counts_per_unit + self.background
        return self.rng.poisson(mean).astype(float) / self.counts_per_unit


def round_trip_delay(distance_km: float, velocity: float = GROUP_VELOCITY) -> float:
    return 2.0 * distance_km * 1e3 / velocity


def _response(grid_ps: np.ndarray, scene: ReflectionScene, width_ps: float) -> np.ndarray:
    out = np.zeros(len(grid_ps))
    for delay, amp in scene.reflections():
        out += amp * (np.abs(grid_ps - delay * _PS) < width_ps - _EDGE_PS)
    return out


def coarse_grid(operator_guess_km: float, velocity: float = GROUP_VELOCITY,
                window_km: float = WINDOW_KM, step_s: float = COARSE_STEP_S) -> np.ndarray:
    """Gate delays (integer ps) on the absolute ``step_s`` grid covering the window."""
    step_ps = int(round(step_s * _PS))
    lo = round_trip_delay(max(0.0, operator_guess_km - window_km), velocity) * _PS
    hi = round_trip_delay(operator_guess_km + window_km, velocity) * _PS
    first, last = math.ceil(lo / step_ps), math.floor(hi / step_ps)
    return np.arange(first, last + 1, dtype=np.int64) * step_ps


def max_coarse_steps(window_km: float = WINDOW_KM, velocity: float = GROUP_VELOCITY,
                     step_s: float = COARSE_STEP_S) -> int:
    return int(math.floor(round_trip_delay(2 * window_km, velocity) / step_s)) + 1


def coarse_scan(
    scene: ReflectionScene,
    operator_guess_km: float,
    velocity: float = GROUP_VELOCITY,
    window_km: float = WINDOW_KM,
    threshold: float | None = None,
    noise: ScanNoise | None = None,
) -> tuple[float, int]:
    """Return ``(candidate delay in s, number of steps)``.

    The response at a gate delay is the summed amplitude of every reflection
    closer than one step.  Ties go to the earliest delay.  If the best
    response is below ``threshold`` (default: half the mirror amplitude) the
    mirror is reported as not found.
    """
    grid = coarse_grid(operator_guess_km, velocity, window_km)
    if len(grid) == 0:
        raise MirrorNotFound("empty scan window")
    resp = _response(grid, scene, COARSE_STEP_S * _PS)
    if noise is not None:
        resp = noise.apply(resp)
    best = int(np.argmax(resp))
    if threshold is None:
        threshold = 0.5 * scene.mirror_amplitude
    if resp[best] < threshold:
        raise MirrorNotFound(
            f"no reflection above {threshold:g} within {operator_guess_km:g} +/- {window_km:g} km")
    return grid[best] / _PS, len(grid)


def fine_scan(
    scene: ReflectionScene,
    coarse_candidate: float,
    coarse_steps: int = 0,
    threshold: float | None = None,
    noise: ScanNoise | None = None,
    coarse_dwell_s: float = 1.2e-3,
    fine_dwell_s: float = 60.0 / 21,
) -> AlignmentResult:
    """Step 100 ps across the 2 ns centred on ``coarse_candidate``.

    The estimate is the midpoint of the contiguous run of grid points that
    share the maximum response.
    """
    step_ps = int(round(FINE_STEP_S * _PS))
    half = int(round(FINE_WINDOW_S * _PS)) // 2
    centre = int(round(coarse_candidate * _PS))
    grid = np.arange(centre - half, centre + half + 1, step_ps, dtype=np.int64)
    resp = _response(grid, scene, FINE_STEP_S * _PS)
    if noise is not None:
        resp = noise.apply(resp)
    if threshold is None:
        threshold = 0.5 * scene.mirror_amplitude
    peak = float(resp.max())
    if peak < threshold:
        raise AlignmentFailed("no peak in the fine window")
    start = int(np.argmax(resp))
    end = start
    while end + 1 < len(resp) and resp[end + 1] == peak:
        end += 1
    estimate_ps = (grid[start] + grid[end]) / 2
    return AlignmentResult(
        estimated_delay_s=estimate_ps / _PS,
        coarse_steps=coarse_steps,
        fine_steps=len(grid),
        coarse_candidate_s=coarse_candidate,
        duration_s=coarse_steps * coarse_dwell_s + len(grid) * fine_dwell_s,
    )


def align(scene: ReflectionScene, operator_guess_km: float, velocity: float = GROUP_VELOCITY,
          noise: ScanNoise | None = None, **kw) -> AlignmentResult:
    candidate, steps = coarse_scan(scene, operator_guess_km, velocity, noise=noise)
    return fine_scan(scene, candidate, steps, noise=noise, **kw)


@dataclass
class SceneSampler:
    """Random scenes whose mirror lies inside the operator's window."""

    guess_km: float = 22.8
    max_offset_km: float = 4.9
    max_parasites: int = 5
    max_parasite_amplitude: float = 0.1
    velocity: float = GROUP_VELOCITY
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __call__(self) -> ReflectionScene:
        rng = self.rng
        dist = rng.uniform(max(0.0, self.guess_km - self.max_offset_km), self.guess_km + self.max_offset_km)
        lo = round_trip_delay(max(0.0, self.guess_km - 5.0), self.velocity)
        hi = round_trip_delay(self.guess_km + 5.0, self.velocity)
        k = int(rng.integers(0, self.max_parasites + 1))
        parasites = tuple(zip(rng.uniform(lo, hi, k), rng.uniform(0, self.max_parasite_amplitude, k)))
        return ReflectionScene(round_trip_delay(dist, self.velocity), parasites)
