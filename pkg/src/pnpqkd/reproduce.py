"""Reproduction targets: published tables and figures against this model.

Each target returns a list of :class:`Check` rows.  ``PASS``/``FAIL`` rows
are hard checks; ``DISCREPANCY-DOCUMENTED`` rows report a known mismatch
whose cause is understood; ``INFO`` rows carry context only.  Reference
values and tolerances come from the ``[reproduce]`` section of the bundled
config for the target.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .analytic import (
    CapacityWarning,
    DistillationImpossible,
    ExperimentRecord,
    LinkBudget,
    qber_det,
    qber_total,
    raw_rate,
    scale_experiment,
    useful_rate,
)
from .config import ExperimentConfig
from .mc_sim import LinkConfig, OpticalConfig, run_session

PASS = "PASS"
FAIL = "FAIL"
DOCUMENTED = "DISCREPANCY-DOCUMENTED"
INFO = "INFO"

TARGETS = ("table1", "table2", "table3", "fig4", "fig5")


@dataclass(frozen=True)
class Check:
    target: str
    quantity: str
    condition: str
    computed: float
    reference: float = math.nan
    tolerance: str = ""
    verdict: str = INFO

    FIELDS = ("target", "quantity", "condition", "computed", "reference", "tolerance", "verdict")

    @property
    def failed(self) -> bool:
        return self.verdict == FAIL


def within(value: float, ref: float, tol: float) -> str:
    return PASS if abs(value - ref) <= tol else FAIL


def _ratio_sigma(a: float, sa: float, b: float, sb: float) -> float:
    r = a / b
    return abs(r) * math.hypot(sa / a, sb / b)


# -- table 1 -----------------------------------------------------------------

def table1(cfg: ExperimentConfig, seed: int = 0) -> list[Check]:
    out = []
    for site in ("lab", "cable"):
        raw = cfg.ref(f"{site}_raw_rate_hz")
        q = cfg.ref(f"{site}_qber")
        ref = cfg.ref(f"{site}_useful_hz")
        rel = cfg.ref(f"{site}_useful_rel_tol")
        got = useful_rate(raw, q)
        cond = f"{site} {cfg.ref(f'{site}_distance_km'):g} km raw={raw:g} Hz qber={q:g}"
        out.append(Check("table1", "useful_rate_hz", cond, got, ref, f"rel {rel:g}", within(got, ref, rel * ref)))

    eta_t = cfg.ref("budget_eta_t")
    d = cfg.detector
    tol = cfg.ref("qber_abs_tol")
    det = qber_det(d.p_noise, cfg.mu, d.eta_d, eta_t)
    cond = f"p_noise={d.p_noise:g} eta_d={d.eta_d:g} mu={cfg.mu:g} eta_t={eta_t:g}"
    out.append(Check("table1", "qber_det", cond, det, cfg.ref("qber_det"), f"abs {tol:g}",
                     within(det, cfg.ref("qber_det"), tol)))
    total = qber_total(det, cfg.qber_opt)
    out.append(Check("table1", "qber_total", cond + f" extinction={cfg.link.extinction_db:g} dB", total,
                     cfg.ref("qber_total"), f"abs {tol:g}", within(total, cfg.ref("qber_total"), tol)))
    out.append(Check("table1", "qber_opt", f"extinction={cfg.link.extinction_db:g} dB", cfg.qber_opt))
    out.append(Check("table1", "eta_t", "cable loss budget", cfg.eta_t, eta_t))
    return out


# -- table 2 -----------------------------------------------------------------

def _mc_point(cfg: ExperimentConfig, mu: float, n_slots: int, seed: int):
    link = LinkConfig(OpticalConfig(mu, cfg.eta_t, cfg.link.extinction_db), cfg.detector_model(),
                      cfg.backscatter_model(), cfg.link.nu)
    schedule = cfg.schedule()
    n_trains = max(1, n_slots // schedule.pulses_per_train)
    return run_session(link, schedule, n_trains, seed)


def table2(cfg: ExperimentConfig, seed: int = 0) -> list[Check]:
    n_slots = int(cfg.ref("n_slots"))
    k = cfg.ref("sigmas")
    target = cfg.ref("ratio")
    reps = {}
    out = []
    for i, name in enumerate(("low", "high", "bright")):
        mu = cfg.ref(f"mu_{name}")
        rep = reps[name] = _mc_point(cfg, mu, n_slots, seed + i)
        cond = f"mu={mu:g} slots={rep.n_slots}"
        out.append(Check("table2", "qber", cond, rep.qber, cfg.ref(f"qber_{name}")))
        out.append(Check("table2", "detection_rate_hz", cond, rep.detection_rate_hz, cfg.ref(f"raw_{name}_hz")))

    lo, hi = reps["low"], reps["high"]
    r = lo.qber / hi.qber
    s = _ratio_sigma(lo.qber, lo.qber_stderr, hi.qber, hi.qber_stderr)
    out.append(Check("table2", "qber_ratio_low_over_high", f"mu {cfg.ref('mu_low'):g} vs {cfg.ref('mu_high'):g}",
                     r, target, f"{k:g} sigma = {k * s:.4f}", within(r, target, k * s)))
    a, b = hi.detections, lo.detections
    rr = a / b
    s = _ratio_sigma(a, math.sqrt(a), b, math.sqrt(b))
    out.append(Check("table2", "raw_rate_ratio_high_over_low", f"mu {cfg.ref('mu_high'):g} vs {cfg.ref('mu_low'):g}",
                     rr, target, f"{k:g} sigma = {k * s:.4f}", within(rr, target, k * s)))

    br = reps["bright"]
    d = cfg.detector
    mu = cfg.ref("mu_bright")
    pred = qber_total(qber_det(d.p_noise, mu, d.eta_d, cfg.eta_t), cfg.qber_opt)
    out.append(Check("table2", "qber_bright_vs_det_plus_opt", f"mu={mu:g}", br.qber, pred,
                     f"{k:g} sigma = {k * br.qber_stderr:.2e}", within(br.qber, pred, k * br.qber_stderr)))
    return out


# -- table 3 -----------------------------------------------------------------

def table3(cfg: ExperimentConfig, seed: int = 0) -> list[Check]:
    target_mu = cfg.ref("target_mu")
    tol = cfg.ref("qber_abs_tol")
    out = []
    for key, label in (("bt", "BT"), ("la", "Los Alamos")):
        rec = ExperimentRecord(label, cfg.ref(f"{key}_distance_km"), cfg.ref(f"{key}_mu"),
                               cfg.ref(f"{key}_raw_hz"), cfg.ref(f"{key}_qber"))
        sc = scale_experiment(rec, target_mu)
        cond = f"{label} mu {rec.mu:g} -> {target_mu:g}"
        out.append(Check("table3", "scaled_qber", cond, sc.qber, cfg.ref(f"{key}_scaled_qber"), f"abs {tol:g}",
                         within(sc.qber, cfg.ref(f"{key}_scaled_qber"), tol)))
        ref_raw = cfg.ref(f"{key}_scaled_raw_hz")
        out.append(Check("table3", "scaled_raw_rate_hz", cond + " (linear in mu)", sc.raw_rate_hz, ref_raw,
                         "", DOCUMENTED if not math.isclose(sc.raw_rate_hz, ref_raw) else PASS))
        out.append(Check("table3", "useful_rate_hz", cond + " from scaled values",
                         useful_rate(sc.raw_rate_hz, sc.qber), cfg.ref(f"{key}_useful_hz"), "", DOCUMENTED))
    return out


# -- figure 4 ----------------------------------------------------------------

def model_point(cfg: ExperimentConfig, eta_d: float, p_noise: float) -> dict:
    """Closed-form rates at one detector setting; useful rate 0 where no key survives."""
    budget = LinkBudget(mu=cfg.mu, nu=cfg.link.nu, eta_d=eta_d, p_noise=p_noise, qber_opt=cfg.qber_opt)
    raw = raw_rate(budget, cfg.nu_effective(), eta_t=cfg.eta_t)
    q = qber_det(p_noise, cfg.mu, eta_d, cfg.eta_t) + cfg.qber_opt
    try:
        use = useful_rate(raw, q) if q < 0.5 else 0.0
    except DistillationImpossible:
        use = 0.0
    return {"eta_d": eta_d, "p_noise": p_noise, "raw_rate_hz": raw, "qber": q, "useful_rate_hz": use}


def operating_sweep(cfg: ExperimentConfig, eta_min: float, eta_max: float, points: int) -> list[dict]:
    if points < 0 or eta_min > eta_max or eta_min <= 0:
        raise ValueError("invalid sweep bounds")
    det = cfg.detector_model()
    etas = np.linspace(eta_min, eta_max, points) if points else ()
    return [model_point(cfg, float(e), det.noise_at(float(e))) for e in etas]


def is_unimodal(values) -> bool:
    """Rises to an interior maximum, then never rises again."""
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        return False
    k = int(np.argmax(v))
    if k == 0 or k == len(v) - 1:
        return False
    return bool(np.all(np.diff(v[: k + 1]) >= 0) and np.all(np.diff(v[k:]) <= 0))


def fig4(cfg: ExperimentConfig, seed: int = 0) -> list[Check]:
    out = []
    for name in ("lab", "cable"):
        site = ExperimentConfig.bundled(name)
        rows = operating_sweep(site, cfg.ref("eta_min"), cfg.ref("eta_max"), int(cfg.ref("points")))
        for r in rows:
            cond = f"{name} eta_d={r['eta_d']:.4f} p_noise={r['p_noise']:.3e} qber={r['qber']:.4f}"
            out.append(Check("fig4", "raw_rate_hz", cond, r["raw_rate_hz"]))
            out.append(Check("fig4", "useful_rate_hz", cond, r["useful_rate_hz"]))
        use = [r["useful_rate_hz"] for r in rows]
        best = rows[int(np.argmax(use))]
        out.append(Check("fig4", "useful_rate_unimodal", f"{name} along operating curve",
                         float(is_unimodal(use)), 1.0, "", PASS if is_unimodal(use) else FAIL))
        out.append(Check("fig4", "best_eta_d", f"{name} maximum useful rate", best["eta_d"]))
    return out


# -- figure 5 ----------------------------------------------------------------

def fig5(cfg: ExperimentConfig, seed: int = 0) -> list[Check]:
    link = cfg.link_config()
    cap = cfg.schedule(1).capacity_pulses
    n_slots = int(cfg.ref("n_slots"))
    lengths = list(range(int(cfg.ref("first_train")), cap, int(cfg.ref("train_step"))))
    lengths += [cap, cap + 20, cap + int(cfg.ref("max_overfill"))]
    reps = {}
    out = []
    for n in sorted(set(lengths)):
        sched = cfg.schedule(n)
        # same seed and slot budget for every length: common random numbers
        reps[n] = rep = run_session(link, sched, max(1, n_slots // n), seed)
        cond = f"pulses_per_train={n} overfill={sched.overfill_pulses}"
        out.append(Check("fig5", "qber", cond, rep.qber))
        out.append(Check("fig5", "qber_backscatter", cond, rep.qber_backscatter))

    base = reps[cap]
    k = cfg.ref("flat_sigmas")
    worst = max(abs(reps[n].qber - base.qber) for n in reps if n <= cap)
    out.append(Check("fig5", "max_qber_deviation_within_capacity", f"train lengths <= {cap}", worst, 0.0,
                     f"{k:g} sigma = {k * base.qber_stderr:.2e}", within(worst, 0.0, k * base.qber_stderr)))
    for over, mult, tol_key in ((20, 2.0, "double_rel_tol"), (int(cfg.ref("max_overfill")), 3.0, "triple_rel_tol")):
        r = reps[cap + over].qber / base.qber
        tol = cfg.ref(tol_key)
        out.append(Check("fig5", "qber_over_baseline", f"overfill={over}", r, mult, f"rel {tol:g}",
                         within(r, mult, tol * mult)))
    return out


def run_target(target: str, seed: int = 0, cfg: ExperimentConfig | None = None) -> list[Check]:
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from {', '.join(TARGETS)}")
    cfg = cfg or ExperimentConfig.bundled(target)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapacityWarning)
        return globals()[target](cfg, seed)
