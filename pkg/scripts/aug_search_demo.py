"""Small augmentation search: baseline plus a few compositions, ranked by ARIS.

A harder cohort than the desk default (weaker rhythm, more noise) so the
baseline leaves room to improve. Runs a 2 x 2 N-LNSO per candidate.

    python3 scripts/aug_search_demo.py --out runs/aug
"""

import argparse
import logging
from pathlib import Path

from transformeeg import experiment as ex
from transformeeg.signal_data import ClassSignalRule, SyntheticCohortSpec, generate_synthetic_cohort, write_cohort
from transformeeg.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/aug")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--candidates", default="Masking+TimeReverse,SignFlip,PhaseSwap+TimeReverse")
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    spec = SyntheticCohortSpec(n_subjects_per_class=8, recording_length_s=16.0, seed=args.seed,
                               class_signal_rules=(ClassSignalRule(10.0, 0.5, 1.0), ClassSignalRule(6.0, 0.5, 1.0)))
    manifest, recs = generate_synthetic_cohort(spec)
    cfg = ex.desk_config(str(write_cohort(manifest, recs, out / "data")), str(out), args.seed)
    cfg.n_outer, cfg.n_inner = 2, 2
    cfg.train = TrainConfig(max_epochs=args.epochs, patience=args.epochs, seed=args.seed)

    baseline, rows = ex.augmentation_search(cfg, ex.parse_candidates(args.candidates))
    (out / "aris.csv").write_text(ex.aris_csv(rows))
    print(f"baseline median {baseline[0]:.2f}, IQR {baseline[1]:.2f}")
    print(ex.aris_csv(rows), end="")


if __name__ == "__main__":
    main()
