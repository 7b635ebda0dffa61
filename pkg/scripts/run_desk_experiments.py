#!/usr/bin/env python3
"""One-shot desk-scale reproduction of every experiment table.

Generates the default synthetic dataset, then runs the unseen-attack
table, the focusing-exponent sweep, the single-channel deployment
study, and the score-distribution report into one output root.

    python3 scripts/run_desk_experiments.py --out runs/desk

Add --quick for a fast smoke pass (fewer epochs, two gamma values).
"""

import argparse
import sys
from pathlib import Path

from cmpad.cli import main as cmpad


def run(argv: list[str]) -> None:
    print(f"\n$ cmpad {' '.join(argv)}")
    code = cmpad(argv)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk", help="output root")
    parser.add_argument("--quick", action="store_true", help="fast smoke pass")
    args = parser.parse_args()

    out = Path(args.out)
    data = out / "dataset"
    common = ["--out", str(out), "--force"]
    epochs = ["--epochs", "2"] if args.quick else []
    gammas = "0,3" if args.quick else "0,1,2,3,4"
    seeds = "0,1" if args.quick else "0,1,2,3,4"

    run(["gen-data", str(data), "--force"])
    run(["loo", "--data", str(data), "--name", "loo", *common, *epochs])
    run(["sweep-gamma", "--data", str(data), "--name", "sweep_gamma",
         "--gammas", gammas, *common, *epochs])
    run(["single-channel", "--data", str(data), "--name", "single_channel",
         "--seeds", seeds, *common, *epochs])
    run(["train", "--data", str(data), "--name", "grandtest", *common, *epochs])
    run(["report", "--data", str(data), "--name", "report",
         "--checkpoint", str(out / "grandtest" / "checkpoint.bin"), *common])
    print(f"\nall artifacts under {out}/")


if __name__ == "__main__":
    main()
