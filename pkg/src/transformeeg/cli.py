"""``transformeeg`` command line: synth, ingest, split, train, eval, aug-search, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .evaluation import ProtocolError, UndefinedMetricError, load_splits, save_splits
from .model import NumericalError
from .signal_data import (
    ClassSignalRule,
    EegDataError,
    EegFormatError,
    SyntheticCohortSpec,
    generate_synthetic_cohort,
    load_cohort,
    subjects_of,
    write_cohort,
)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
GLOBAL_DEFAULTS = {"config": None, "seed": None, "jobs": 1, "out": None, "verbose": False}


def _config(args) -> ex.ExperimentConfig:
    if args.config:
        cfg = ex.ExperimentConfig.load(args.config)
    elif getattr(args, "manifest", None):
        cfg = ex.desk_config(args.manifest, args.out or "results")
    else:
        raise ex.ConfigError("pass --config or --manifest")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SyntheticCohortSpec(
        n_subjects_per_class=args.subjects_per_class,
        recording_length_s=args.length,
        sampling_rate=args.fs,
        n_channels=args.channels,
        class_signal_rules=(ClassSignalRule(args.hc_freq, args.amplitude, args.noise),
                            ClassSignalRule(args.pd_freq, args.amplitude, args.noise)),
        seed=args.seed if args.seed is not None else 42,
    )
    manifest, recs = generate_synthetic_cohort(spec)
    path = write_cohort(manifest, recs, args.out or "synth")
    print(path)
    return 0


def cmd_ingest(args) -> int:
    manifest, windows = load_cohort(args.manifest, args.window, args.overlap, args.downsample)
    per_subject: dict[str, int] = {}
    for w in windows:
        key = f"{w.meta.dataset_id}/{w.meta.subject_id}"
        per_subject[key] = per_subject.get(key, 0) + 1
    report = {
        "recordings": len(manifest.entries),
        "subjects": len(per_subject),
        "windows": len(windows),
        "window_shape": list(windows[0].data.shape) if windows else None,
        "windows_per_subject": per_subject,
    }
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ingest.json").write_text(text)
    print(text)
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    cfg.n_outer = args.n_outer or cfg.n_outer
    cfg.n_inner = args.n_inner or cfg.n_inner
    windows = ex.load_windows(cfg)
    plans = ex.plan_splits(windows, cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_splits(plans, cfg.out / "splits.json")
    # round-trip through the file so the written plans are what gets validated
    load_splits(cfg.out / "splits.json", {(d, s) for d, s, _ in subjects_of(windows)})
    print(f"{len(plans)} plans -> {cfg.out / 'splits.json'}")
    return 0


def _plans_for(cfg, windows):
    path = cfg.out / "splits.json"
    if path.exists():
        return load_splits(path, {(d, s) for d, s, _ in subjects_of(windows)})
    plans = ex.plan_splits(windows, cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_splits(plans, path)
    return plans


def cmd_train(args) -> int:
    cfg = _config(args)
    windows = ex.load_windows(cfg)
    plans = ex.select_plans(_plans_for(cfg, windows), None if args.all else args.select)
    rows = ex.run_plans(cfg, plans, windows, jobs=args.jobs)
    (cfg.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    for r in rows:
        print(f"outer={r['outer']} inner={r['inner']} effective_epochs={r['effective_epochs']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    cfg.threshold_correction = args.threshold_correction
    cfg.aggregate = args.aggregate
    windows = ex.load_windows(cfg)
    plans = ex.select_plans(_plans_for(cfg, windows), None if args.all else args.select)
    rows = ex.evaluate_checkpoints(cfg, plans, windows)
    mpath, spath = ex.write_results(cfg, rows)
    print(mpath)
    print(spath)
    return 0


def cmd_aug_search(args) -> int:
    if args.results:
        baseline, results = ex.read_results_csv(args.results)
        rows = ex.aris_table(baseline, results)
        out = Path(args.out) if args.out else Path(".")
    else:
        cfg = _config(args)
        baseline, rows = ex.augmentation_search(cfg, ex.parse_candidates(args.candidates), args.jobs)
        out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    text = ex.aris_csv(rows)
    (out / "aris.csv").write_text(text)
    print(f"baseline median={baseline[0]:.2f} iqr={baseline[1]:.2f}")
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    text = ex.write_report(Path(args.out or "results"))
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering ones given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel worker processes over splits")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="transformeeg", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic two-class cohort")
    s.add_argument("--subjects-per-class", type=int, default=16)
    s.add_argument("--length", type=float, default=24.0, help="recording length in seconds")
    s.add_argument("--fs", type=float, default=125.0)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--hc-freq", type=float, default=10.0)
    s.add_argument("--pd-freq", type=float, default=6.0)
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="read a manifest and report windows")
    s.add_argument("--manifest", required=True)
    s.add_argument("--window", type=float, default=16.0, help="window length in seconds")
    s.add_argument("--overlap", type=float, default=0.25)
    s.add_argument("--downsample", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", parents=[common], help="plan N-LNSO splits")
    s.add_argument("--manifest")
    s.add_argument("--n-outer", type=int)
    s.add_argument("--n-inner", type=int)
    s.set_defaults(func=cmd_split)

    for name, func, hlp in (("train", cmd_train, "train selected splits"),
                            ("eval", cmd_eval, "evaluate trained checkpoints")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--manifest")
        g = s.add_mutually_exclusive_group()
        g.add_argument("--select", help='e.g. "outer=0,inner=0"')
        g.add_argument("--all", action="store_true")
        if name == "eval":
            s.add_argument("--threshold-correction", action=argparse.BooleanOptionalAction, default=True)
            s.add_argument("--aggregate", action=argparse.BooleanOptionalAction, default=False)
        s.set_defaults(func=func)

    s = sub.add_parser("aug-search", parents=[common], help="rank augmentation compositions by ARIS")
    s.add_argument("--manifest")
    s.add_argument("--candidates", help='comma list like "Masking+TimeReverse,SignFlip", or "all"')
    s.add_argument("--results", help="CSV of composition,median,iqr (incl. a baseline row) to rank directly")
    s.set_defaults(func=cmd_aug_search)

    s = sub.add_parser("report", parents=[common], help="render summary.json (and aris.csv) as a table")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EegFormatError, EegDataError, ProtocolError, UndefinedMetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError) as e:
        # ConfigError, ModelConfigError, ParameterError, AugmentationError and bad values
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
