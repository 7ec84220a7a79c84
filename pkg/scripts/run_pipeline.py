#!/usr/bin/env python3
"""Desk-scale end-to-end demo: synth -> train -> forecast -> evaluate.

Runs everything through the CLI so the artifacts match what a shell user
would get.  With the defaults this takes a couple of minutes on a laptop;
pass --iterations 2000 for a properly converged model.
"""

import argparse
import sys
from pathlib import Path

from scengen.cli import main as cli


def run(argv):
    print("+ scengen " + " ".join(argv))
    code = cli(argv)
    if code not in (0,):
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="pipeline_demo")
    ap.add_argument("--kind", default="wind", choices=["wind", "solar"])
    ap.add_argument("--sites", type=int, default=4)
    ap.add_argument("--days", type=int, default=400)
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--alpha", type=float, default=2.0)
    ap.add_argument("--scenarios", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = Path(args.workdir)
    fleet = base / "fleet"
    run_dir = base / "run"
    scen = base / f"scenarios_alpha{args.alpha}"
    report = base / "report"

    run(["synth", "--out", str(fleet), "--kind", args.kind,
         "--sites", str(args.sites), "--days", str(args.days),
         "--seed", str(args.seed)])
    run(["train", "--data", str(fleet), "--out", str(run_dir),
         "--iterations", str(args.iterations), "--seed", str(args.seed)])
    run(["forecast", "--checkpoint", str(run_dir / "checkpoint.bin"),
         "--baseline", "diurnal" if args.kind == "solar" else "last",
         "--history", str(fleet), "--alpha", str(args.alpha),
         "--n", str(args.scenarios), "--seed", str(args.seed),
         "--out", str(scen)])
    run(["evaluate", "--scenarios", str(scen), "--reference", str(fleet),
         "--out", str(report)])
    print(f"\nartifacts under {base}/: fleet data, checkpoint + trainlog, "
          f"{args.scenarios} scenario CSVs, metric report")


if __name__ == "__main__":
    main()
