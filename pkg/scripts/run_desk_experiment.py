"""Synthesize the two-class desk cohort and run the 4 x 3 N-LNSO on it.

    python3 scripts/run_desk_experiment.py --out runs/desk --seed 42
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from transformeeg.experiment import run_desk_experiment, write_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = run_desk_experiment(args.out, args.seed, args.jobs)
    bal = [r["bal_acc"] for r in rows]
    print(f"{len(rows)} splits, median held-out balanced accuracy {np.median(bal):.3f}")
    print(write_report(Path(args.out) / "results"), end="")


if __name__ == "__main__":
    main()
