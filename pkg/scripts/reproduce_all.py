"""Run every reproduction target and write one CSV per target."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from pnpqkd import reproduce as repro
from pnpqkd.cli import write_csv


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="results")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for target in repro.TARGETS:
        checks = repro.run_target(target, args.seed)
        write_csv(repro.Check.FIELDS, [[getattr(c, f) for f in repro.Check.FIELDS] for c in checks],
                  str(out / f"{target}.csv"))
        counts = {v: sum(c.verdict == v for c in checks) for v in (repro.PASS, repro.FAIL, repro.DOCUMENTED)}
        failed += counts[repro.FAIL]
        print(f"{target:<7} pass={counts[repro.PASS]} fail={counts[repro.FAIL]} "
              f"documented={counts[repro.DOCUMENTED]}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
