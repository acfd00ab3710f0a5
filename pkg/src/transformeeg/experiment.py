"""Experiment orchestration shared by the CLI and the scripts.

Every function here is a plain composition of the library modules; the CLI
only parses arguments and calls into this file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augmentation import AriInputs, AugComposition, AugmentationSpec, Kind, all_compositions, aris
from .evaluation import (
    SplitPlan,
    calibrate_min_ratio,
    ConfusionMatrix,
    balanced_accuracy,
    load_splits,
    metrics_report,
    nlnso_splits,
    optimize_threshold,
    positive_fraction,
    save_splits,
    summarize_nlnso,
)
from .model import ModelConfig, build_model, load_checkpoint, predict_proba, save_checkpoint
from .signal_data import (
    EegWindow,
    SyntheticCohortSpec,
    generate_synthetic_cohort,
    load_cohort,
    stack_windows,
    subjects_of,
    write_cohort,
)
from .training import TrainConfig, TrainRecord, fit, split_seed

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["outer", "inner", "threshold", "bal_acc", "f1_w", "kappa", "effective_epochs",
                  "val_bal_acc_default", "val_bal_acc_chosen"]
AGG_COLUMNS = ["min_ratio", "rec_tp", "rec_fp", "rec_tn", "rec_fn", "rec_bal_acc"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    manifest: str = "manifest.json"
    window_length_s: float = 16.0
    overlap_fraction: float = 0.25
    downsample_factor: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_outer: int = 4
    n_inner: int = 3
    seed: int = 42
    out_dir: str = "results"
    threshold_correction: bool = True
    aggregate: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(_fill_model(self.model))
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_json(cls, text: str, base_dir: Path | None = None) -> "ExperimentConfig":
        try:
            d = json.loads(text)
            cfg = cls(**d)
        except (TypeError, KeyError, json.JSONDecodeError) as e:
            raise ConfigError(f"invalid experiment config: {e}") from None
        if base_dir is not None and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str(base_dir / cfg.manifest)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        return cls.from_json(p.read_text(), p.parent)


def _fill_model(d: dict) -> dict:
    base = ModelConfig().to_dict()
    for k in ("tokenizer", "encoder", "head"):
        base[k].update(d.get(k, {}))
    base["in_samples"] = d.get("in_samples", base["in_samples"])
    if "head" not in d or "hidden" not in d["head"]:
        base["head"]["hidden"] = None
    return base


def desk_config(manifest: str, out_dir: str, seed: int = 42) -> ExperimentConfig:
    """Quickstart setting: 8 channels, 4 s windows at 125 Hz, 4 x 3 N-LNSO."""
    return ExperimentConfig(
        manifest=manifest, window_length_s=4.0, overlap_fraction=0.25,
        model=ModelConfig.small(8, 500),
        train=TrainConfig(max_epochs=30, patience=8, seed=seed),
        n_outer=4, n_inner=3, seed=seed, out_dir=out_dir,
    )


# ---------------------------------------------------------------------------
# data and splits


def load_windows(cfg: ExperimentConfig) -> list[EegWindow]:
    if not Path(cfg.manifest).exists():
        raise ConfigError(f"manifest {cfg.manifest} does not exist")
    _, windows = load_cohort(cfg.manifest, cfg.window_length_s, cfg.overlap_fraction, cfg.downsample_factor)
    if not windows:
        raise ConfigError("no windows extracted; recordings shorter than one window?")
    n = windows[0].data.shape[1]
    if n != cfg.model.in_samples or windows[0].data.shape[0] != cfg.model.tokenizer.in_channels:
        raise ConfigError(
            f"windows are {windows[0].data.shape}, model expects "
            f"({cfg.model.tokenizer.in_channels}, {cfg.model.in_samples})"
        )
    return windows


def plan_splits(windows: list[EegWindow], cfg: ExperimentConfig) -> list[SplitPlan]:
    return nlnso_splits(subjects_of(windows), cfg.n_outer, cfg.n_inner, cfg.seed)


def select_plans(plans: list[SplitPlan], selector: str | None) -> list[SplitPlan]:
    """``None`` or ``"all"`` keeps every plan; ``"outer=0,inner=1"`` filters."""
    if selector in (None, "", "all"):
        return plans
    want = {}
    for part in selector.split(","):
        k, _, v = part.partition("=")
        if k.strip() not in ("outer", "inner") or not v.strip().isdigit():
            raise ConfigError(f"bad split selector {selector!r}")
        want[k.strip()] = int(v)
    out = [p for p in plans
           if want.get("outer", p.outer_index) == p.outer_index
           and want.get("inner", p.inner_index) == p.inner_index]
    if not out:
        raise ConfigError(f"selector {selector!r} matches no split")
    return out


def _role_windows(windows, subjects):
    return [w for w in windows if w.meta.subject_key in subjects]


def split_dir(cfg: ExperimentConfig, plan: SplitPlan) -> Path:
    return cfg.out / "splits" / f"o{plan.outer_index:02d}_i{plan.inner_index:02d}"


# ---------------------------------------------------------------------------
# training and evaluation of one split


def train_plan(cfg: ExperimentConfig, plan: SplitPlan, windows: list[EegWindow]):
    tr = _role_windows(windows, plan.train_subjects)
    va = _role_windows(windows, plan.val_subjects)
    Xtr, ytr = stack_windows(tr)
    Xva, yva = stack_windows(va)
    params = build_model(cfg.model, cfg.seed)
    return fit(params, Xtr, ytr, Xva, yva, cfg.train,
               split_seed(cfg.train.seed, plan.outer_index, plan.inner_index))


def _by_recording(windows, probs):
    groups: dict[str, tuple[list, int]] = {}
    for w, p in zip(windows, probs):
        groups.setdefault(w.recording_id, ([], w.label))[0].append(p)
    return [(np.array(ps), lab) for ps, lab in groups.values()]


def evaluate_plan(params, plan: SplitPlan, windows: list[EegWindow], record: TrainRecord | None,
                  threshold_correction: bool, aggregate: bool) -> dict:
    va = _role_windows(windows, plan.val_subjects)
    te = _role_windows(windows, plan.test_subjects)
    Xva, yva = stack_windows(va)
    Xte, yte = stack_windows(te)
    p_va = predict_proba(params, Xva)
    p_te = predict_proba(params, Xte)
    th = optimize_threshold(p_va, yva)
    threshold = th.threshold if threshold_correction else 0.5
    rep = metrics_report(p_te, yte, threshold)
    row = {
        "outer": plan.outer_index,
        "inner": plan.inner_index,
        "threshold": threshold,
        "bal_acc": rep.balanced_accuracy,
        "f1_w": rep.f1_weighted,
        "kappa": rep.cohens_kappa,
        "effective_epochs": record.effective_training_epochs if record else -1,
        "val_bal_acc_default": th.default_balanced_accuracy,
        "val_bal_acc_chosen": th.balanced_accuracy if threshold_correction else th.default_balanced_accuracy,
    }
    if aggregate:
        ratio = calibrate_min_ratio(_by_recording(va, p_va))
        recs = _by_recording(te, p_te)
        preds = [positive_fraction(p) >= ratio for p, _ in recs]
        cm = ConfusionMatrix.from_predictions([lab for _, lab in recs], preds)
        row.update(min_ratio=ratio, rec_tp=cm.tp, rec_fp=cm.fp, rec_tn=cm.tn, rec_fn=cm.fn,
                   rec_bal_acc=balanced_accuracy(cm))
    return row


def _run_one(args):
    cfg, plan, windows = args
    params, record = train_plan(cfg, plan, windows)
    row = evaluate_plan(params, plan, windows, record, cfg.threshold_correction, cfg.aggregate)
    return plan, params, record, row


def run_plans(cfg: ExperimentConfig, plans: list[SplitPlan], windows: list[EegWindow],
              jobs: int = 1, write: bool = True) -> list[dict]:
    """Train and evaluate every plan; returns metric rows sorted by (outer, inner)."""
    tasks = [(cfg, p, windows) for p in plans]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    rows = []
    for plan, params, record, row in results:
        if write:
            write_split_outputs(cfg, plan, params, record)
        rows.append(row)
    rows.sort(key=lambda r: (r["outer"], r["inner"]))
    return rows


def write_split_outputs(cfg: ExperimentConfig, plan: SplitPlan, params, record: TrainRecord) -> None:
    d = split_dir(cfg, plan)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, d / "model.ckpt", extra={"outer": plan.outer_index, "inner": plan.inner_index,
                                                     "train_summary": record.summary()})
    (d / "train_record.csv").write_text(record.to_csv())
    (d / "train_summary.json").write_text(record.summary_json())


def evaluate_checkpoints(cfg: ExperimentConfig, plans: list[SplitPlan], windows: list[EegWindow]) -> list[dict]:
    rows = []
    for plan in plans:
        ck = split_dir(cfg, plan) / "model.ckpt"
        if not ck.exists():
            raise FileNotFoundError(f"missing checkpoint {ck}")
        params, extra = load_checkpoint(ck)
        eff = extra.get("train_summary", {}).get("effective_training_epochs", -1)
        row = evaluate_plan(params, plan, windows, None, cfg.threshold_correction, cfg.aggregate)
        row["effective_epochs"] = eff
        rows.append(row)
    rows.sort(key=lambda r: (r["outer"], r["inner"]))
    return rows


# ---------------------------------------------------------------------------
# result files


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(rows: list[dict]) -> str:
    cols = METRIC_COLUMNS + ([c for c in AGG_COLUMNS if rows and c in rows[0]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def summary_dict(rows: list[dict]) -> dict:
    metrics = ["bal_acc", "f1_w", "kappa"] + (["rec_bal_acc"] if rows and "rec_bal_acc" in rows[0] else [])
    summ = {k: asdict(v) for k, v in summarize_nlnso(rows, metrics).items()}
    body = {"n_splits": len(rows), "metrics": summ}
    digest = hashlib.sha256(metrics_csv(rows).encode()).hexdigest()
    return {**body, "metrics_csv_sha256": digest}


def write_results(cfg: ExperimentConfig, rows: list[dict]) -> tuple[Path, Path]:
    cfg.out.mkdir(parents=True, exist_ok=True)
    mpath = cfg.out / "metrics.csv"
    spath = cfg.out / "summary.json"
    mpath.write_text(metrics_csv(rows))
    spath.write_text(json.dumps(summary_dict(rows), indent=1, sort_keys=True))
    return mpath, spath


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, selector: str | None = None) -> list[dict]:
    """Load data, plan splits, train, evaluate and write every result file."""
    windows = load_windows(cfg)
    plans = plan_splits(windows, cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_splits(plans, cfg.out / "splits.json")
    rows = run_plans(cfg, select_plans(plans, selector), windows, jobs)
    write_results(cfg, rows)
    return rows


def run_desk_experiment(out_dir, seed: int = 42, jobs: int = 1,
                        spec: SyntheticCohortSpec | None = None) -> list[dict]:
    """Synthesize the 16-per-class, 24 s cohort under ``out_dir/data`` and run the desk N-LNSO on it."""
    out = Path(out_dir)
    spec = spec or SyntheticCohortSpec(n_subjects_per_class=16, recording_length_s=24.0, seed=seed)
    manifest, recs = generate_synthetic_cohort(spec)
    mpath = write_cohort(manifest, recs, out / "data")
    return run_experiment(desk_config(str(mpath), str(out / "results"), seed), jobs)


# ---------------------------------------------------------------------------
# augmentation search


def aris_table(baseline: tuple[float, float], results: dict[str, tuple[float, float]]) -> list[dict]:
    """Rank compositions by ARIS against ``baseline = (median, IQR)``; highest first."""
    mb, ib = baseline
    rows = []
    for name, (m, i) in results.items():
        score = aris(AriInputs(mb, m, ib, i))
        rows.append({"composition": name, "median": m, "iqr": i, "aris": score})
    rows.sort(key=lambda r: (-r["aris"], r["composition"]))
    return rows


BASELINE_NAMES = ("baseline", "none", "identity")


def read_results_csv(path) -> tuple[tuple[float, float], dict[str, tuple[float, float]]]:
    """Read ``composition,median,iqr`` rows; the row named baseline/none/identity is the reference."""
    baseline = None
    results = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            name = row["composition"].strip()
            pair = (float(row["median"]), float(row["iqr"]))
            if name.lower() in BASELINE_NAMES:
                baseline = pair
            else:
                results[name] = pair
    if baseline is None:
        raise ConfigError(f"{path}: no baseline row")
    return baseline, results


def parse_candidates(text: str | None) -> list[AugComposition]:
    """``"all"`` for the 100 compositions, else a comma list like ``"Masking+TimeReverse,SignFlip"``."""
    if text in (None, "", "all"):
        pairs = all_compositions()
    else:
        pairs = []
        for item in text.split(","):
            names = [n.strip() for n in item.split("+")]
            if len(names) > 2:
                raise ConfigError(f"composition {item!r} has more than two transforms")
            try:
                kinds = [Kind(n) for n in names]
            except ValueError:
                raise ConfigError(f"unknown augmentation in {item!r}") from None
            pairs.append((kinds[0], kinds[1] if len(kinds) > 1 else None))
    return [AugComposition(AugmentationSpec(a), AugmentationSpec(b) if b else None) for a, b in pairs]


def aris_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["composition", "median", "iqr", "aris"])
    for r in rows:
        w.writerow([r["composition"], _fmt(r["median"]), _fmt(r["iqr"]), _fmt(r["aris"])])
    return buf.getvalue()


def augmentation_search(cfg: ExperimentConfig, candidates: list[AugComposition],
                        jobs: int = 1) -> tuple[tuple[float, float], list[dict]]:
    """Run the N-LNSO once without augmentation and once per candidate, then rank by ARIS."""
    windows = load_windows(cfg)
    plans = plan_splits(windows, cfg)

    def median_iqr(comp):
        train = TrainConfig.from_dict({**cfg.train.to_dict(), "augmentation": comp.to_dict() if comp else None})
        run_cfg = ExperimentConfig(**{**cfg.__dict__, "train": train})
        rows = run_plans(run_cfg, plans, windows, jobs, write=False)
        s = summarize_nlnso(rows, ["bal_acc"])["bal_acc"]
        return 100 * s.median, 100 * s.iqr

    baseline = median_iqr(None)
    if baseline[1] <= 0:
        log.warning("baseline IQR is zero; ARIS is undefined and every row will be skipped")
        return baseline, [{"composition": c.name, "median": float("nan"), "iqr": float("nan"),
                           "aris": float("nan")} for c in candidates]
    results = {c.name: median_iqr(c) for c in candidates}
    return baseline, aris_table(baseline, results)


def render_report(summary: dict, aris_text: str | None = None) -> str:
    lines = [f"N-LNSO splits: {summary['n_splits']}", "",
             "| metric | median | IQR | p1-p99 range | min | max |", "|---|---|---|---|---|---|"]
    for name, s in summary["metrics"].items():
        lines.append(f"| {name} | {s['median']:.4f} | {s['iqr']:.4f} | {s['p99'] - s['p1']:.4f} "
                     f"| {s['min']:.4f} | {s['max']:.4f} |")
    if aris_text:
        lines += ["", "Augmentation ranking (ARIS):", "", aris_text.rstrip()]
    return "\n".join(lines) + "\n"


def write_report(out: Path) -> str:
    spath = out / "summary.json"
    if not spath.exists():
        raise FileNotFoundError(f"{spath} not found; run eval first")
    apath = out / "aris.csv"
    text = render_report(json.loads(spath.read_text()), apath.read_text() if apath.exists() else None)
    (out / "report.md").write_text(text)
    return text
