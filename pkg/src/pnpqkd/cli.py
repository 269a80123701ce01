"""Command-line entry point: ``pnpqkd {model,simulate,run,reproduce,align}``."""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import reproduce as repro
from .alignment import AlignmentError, SceneSampler, align
from .analytic import CapacityWarning, qber_ratio
from .config import ConfigError, ExperimentConfig
from .mc_sim import QberReport, run_session, session_events
from .protocol.session import (
    Alice,
    Bob,
    SessionReport,
    SocketFiber,
    build_channel,
    derive_seeds,
    endpoint_report,
    run_full_session,
)
from .transport import QUANTUM_STATES, SocketEndpoint, connect, listen


def fmt(v) -> str:
    """Locale-free, platform-stable text for one CSV cell."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".10g")
    return str(v)


def write_csv(header, rows, out: str | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    text = buf.getvalue()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return text


def load_config(args, default: str | None = None) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig.bundled(default) if default else ExperimentConfig()
    if Path(args.config).is_file():
        return ExperimentConfig.load(args.config)
    return ExperimentConfig.bundled(args.config)


# -- model -------------------------------------------------------------------

MODEL_HEADER = ("eta_d", "p_noise", "raw_rate_hz", "qber", "useful_rate_hz")


def cmd_model(args) -> int:
    cfg = load_config(args)
    if args.points is None:
        rows = [repro.model_point(cfg, cfg.detector.eta_d, cfg.detector.p_noise)]
    else:
        lo = args.eta_min if args.eta_min is not None else cfg.detector.operating_curve[0][0]
        hi = args.eta_max if args.eta_max is not None else cfg.detector.operating_curve[-1][0]
        try:
            rows = repro.operating_sweep(cfg, lo, hi, args.points)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    write_csv(MODEL_HEADER, [[r[k] for k in MODEL_HEADER] for r in rows], args.out)
    return 0


# -- simulate ----------------------------------------------------------------

def predicted(cfg: ExperimentConfig, schedule) -> dict[str, float]:
    """Closed-form counterparts of the simulated quantities."""
    opt = cfg.optical()
    det = cfg.detector_model()
    p_phot = opt.photon_click_prob(det.eta_d)
    p_n = det.p_noise_per_gate + cfg.backscatter_model().extra_noise(schedule)
    nu_eff = cfg.nu_effective(schedule)
    return {
        "raw_rate_hz": 0.5 * nu_eff * (p_phot + 2 * p_n),
        "detection_rate_hz": nu_eff * (p_phot + 2 * p_n),
        "qber": qber_ratio(p_n, p_phot, opt.qber_opt),
    }


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    if args.mu is not None:
        cfg.protocol.mu = args.mu
    schedule = cfg.schedule(args.pulses)
    link = cfg.link_config()
    if args.events:
        _, events = session_events(link, schedule, args.trains, args.seed, args.intercept)
        with open(args.events, "w") as fh:
            events.to_csv(fh)
    rep = run_session(link, schedule, args.trains, args.seed, intercept=args.intercept)
    pred = predicted(cfg, schedule)
    rows = [[f, getattr(rep, f), pred.get(f, "")] for f in QberReport.CSV_FIELDS]
    write_csv(("quantity", "simulated", "predicted"), rows, args.out)
    return 0


# -- run ---------------------------------------------------------------------

def _transcript_lines(role: str, transcript) -> list[str]:
    return [f"{role} {d} {t:02x} {p.hex()}\n" for d, t, p in transcript]


def _write_key(path: str, key: np.ndarray) -> None:
    Path(path).write_text(np.packbits(key).tobytes().hex() + "\n")


def _write_outputs(args, rep: SessionReport, results) -> None:
    write_csv(SessionReport.CSV_FIELDS, [rep.row()], args.out)
    if args.key_out:
        _write_key(args.key_out, rep.alice_key if len(rep.alice_key) else rep.bob_key)
    if args.transcript:
        lines = []
        for res in results:
            lines += _transcript_lines(res.role, res.transcript)
        Path(args.transcript).write_text("".join(lines))


def _abort_status(rep: SessionReport) -> int:
    if rep.aborted_stage:
        print(f"aborted: {rep.aborted_stage} ({rep.abort_reason})", file=sys.stderr)
        return 3
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args)
    n_slots = args.slots or cfg.protocol.n_slots
    schedule = cfg.schedule()
    link = cfg.link_config()
    if args.role == "local":
        rep = run_full_session(cfg.policy(), link, schedule, n_slots, args.seed, intercept=args.intercept)
        _write_outputs(args, rep, [rep.alice, rep.bob])
        if args.bob_key_out:
            _write_key(args.bob_key_out, rep.bob_key)
        if not rep.aborted_stage and not np.array_equal(rep.alice_key, rep.bob_key):
            print("error: final keys differ", file=sys.stderr)
            return 4
        return _abort_status(rep)

    if bool(args.listen) == bool(args.connect):
        print("error: give exactly one of --listen or --connect", file=sys.stderr)
        return 2
    # first connection carries the public channel, second the quantum states
    socks = listen(args.listen, 2) if args.listen else [connect(args.connect), connect(args.connect)]
    chan = SocketEndpoint(socks[0])
    fiber = SocketFiber(SocketEndpoint(socks[1], allowed=[QUANTUM_STATES]))
    gens = derive_seeds(args.seed)
    if args.role == "alice":
        party = Alice(cfg.policy(), n_slots, gens["alice"], chan, fiber)
    else:
        ch = build_channel(link, schedule, gens["eve"], args.intercept)
        party = Bob(gens["bob"], chan, fiber, ch, gens["channel"])
    try:
        res = party.run()
    finally:
        chan.close()
        fiber.ep.close()
    rep = endpoint_report(res, n_slots, cfg.nu_effective(schedule))
    _write_outputs(args, rep, [res])
    return _abort_status(rep)


# -- reproduce ---------------------------------------------------------------

def cmd_reproduce(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    checks = repro.run_target(args.target, args.seed, cfg)
    write_csv(repro.Check.FIELDS, [[getattr(c, f) for f in repro.Check.FIELDS] for c in checks], args.out)
    hard = [c for c in checks if c.verdict in (repro.PASS, repro.FAIL)]
    failed = [c for c in hard if c.failed]
    documented = sum(c.verdict == repro.DOCUMENTED for c in checks)
    for c in hard + [c for c in checks if c.verdict == repro.DOCUMENTED]:
        print(f"{c.verdict:<22} {c.target} {c.quantity} [{c.condition}] computed={fmt(c.computed)} "
              f"reference={fmt(c.reference)}", file=sys.stderr)
    print(f"{args.target}: {len(hard) - len(failed)}/{len(hard)} checks passed, "
          f"{documented} documented discrepancies", file=sys.stderr)
    return 1 if failed else 0


# -- align -------------------------------------------------------------------

def cmd_align(args) -> int:
    cfg = load_config(args, default="alignment")
    v = cfg.train.group_velocity_m_per_s
    if args.scenes:
        sampler = SceneSampler(guess_km=cfg.guess_km, max_offset_km=cfg.alignment.max_offset_km,
                               velocity=v, rng=np.random.default_rng(args.seed))
        rows = []
        for i in range(args.scenes):
            scene = sampler()
            try:
                r = align(scene, cfg.guess_km, v)
                rows.append([i, scene.true_delay_s, r.estimated_delay_s, r.error_s(scene), r.coarse_steps,
                             r.fine_steps, 1])
            except AlignmentError:
                rows.append([i, scene.true_delay_s, math.nan, math.nan, 0, 0, 0])
        write_csv(("scene", "true_delay_s", "estimated_delay_s", "error_s", "coarse_steps", "fine_steps", "ok"),
                  rows, args.out)
        ok = sum(r[-1] for r in rows)
        worst = max((abs(r[3]) for r in rows if r[-1]), default=math.nan)
        print(f"{ok}/{len(rows)} scenes aligned, max error {worst * 1e12:.1f} ps", file=sys.stderr)
        return 0 if ok == len(rows) else 1
    scene = cfg.scene()
    try:
        r = align(scene, cfg.guess_km, v)
    except AlignmentError as exc:
        print(f"alignment failed: {exc}", file=sys.stderr)
        return 1
    print(r.report(scene))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnpqkd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trains=False):
        sp.add_argument("--config", help="config file, or the name of a bundled config")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="CSV output path (default: stdout)")
        if trains:
            sp.add_argument("--trains", type=int, default=100_000)

    sp = sub.add_parser("model", help="closed-form rates along the detector operating curve")
    common(sp)
    sp.add_argument("--eta-min", type=float)
    sp.add_argument("--eta-max", type=float)
    sp.add_argument("--points", type=int, help="sweep size; omit for the configured working point only")
    sp.set_defaults(func=cmd_model)

    sp = sub.add_parser("simulate", help="Monte Carlo link session next to the closed-form prediction")
    common(sp, trains=True)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--pulses", type=int, help="pulses per train (default: fill the storage line)")
    sp.add_argument("--intercept", action="store_true")
    sp.add_argument("--events", help="also write every detection event to this CSV")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="full key exchange between Alice and Bob")
    common(sp)
    sp.add_argument("--role", choices=("alice", "bob", "local"), default="local")
    sp.add_argument("--listen", metavar="ADDR")
    sp.add_argument("--connect", metavar="ADDR")
    sp.add_argument("--slots", type=int)
    sp.add_argument("--key-out", help="write the final key as hex (Alice's key for --role local)")
    sp.add_argument("--bob-key-out", help="with --role local, also write Bob's key here")
    sp.add_argument("--transcript", help="write the public-channel transcript")
    sp.add_argument("--intercept", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("reproduce", help="compare against published tables and figures")
    sp.add_argument("target", choices=repro.TARGETS)
    sp.add_argument("--config", help="override the bundled config for the target")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_reproduce)

    sp = sub.add_parser("align", help="two-stage OTDR timing alignment")
    common(sp)
    sp.add_argument("--scenes", type=int, default=0, help="align this many random scenes instead")
    sp.set_defaults(func=cmd_align)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CapacityWarning)
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ConnectionError, OSError) as exc:
        print(f"connection error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
