"""Nested leave-N-subjects-out splits, classification metrics and threshold correction."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class ProtocolError(ValueError):
    """Data leakage or an infeasible split request."""


class UndefinedMetricError(ValueError):
    pass


SubjectKey = tuple[str, str]  # (dataset_id, subject_id)


# ---------------------------------------------------------------------------
# split planning


@dataclass(frozen=True)
class SplitPlan:
    outer_index: int
    inner_index: int
    test_subjects: frozenset
    val_subjects: frozenset
    train_subjects: frozenset

    def validate(self, all_subjects=None) -> None:
        t, v, r = self.test_subjects, self.val_subjects, self.train_subjects
        if t & v or t & r or v & r:
            raise ProtocolError(f"split ({self.outer_index}, {self.inner_index}) has overlapping subject sets")
        if not (t and v and r):
            raise ProtocolError(f"split ({self.outer_index}, {self.inner_index}) has an empty role")
        if all_subjects is not None and (t | v | r) != set(all_subjects):
            raise ProtocolError(f"split ({self.outer_index}, {self.inner_index}) does not cover every subject")

    def role_of(self, key: SubjectKey) -> str:
        if key in self.test_subjects:
            return "test"
        if key in self.val_subjects:
            return "val"
        if key in self.train_subjects:
            return "train"
        raise KeyError(key)

    def to_dict(self) -> dict:
        def keys(s):
            return [list(k) for k in sorted(s)]
        return {"outer": self.outer_index, "inner": self.inner_index,
                "test": keys(self.test_subjects), "val": keys(self.val_subjects),
                "train": keys(self.train_subjects)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        def keys(rows):
            return frozenset(tuple(r) for r in rows)
        return cls(int(d["outer"]), int(d["inner"]), keys(d["test"]), keys(d["val"]), keys(d["train"]))


def _deal(subjects: list[tuple[str, str, int]], n_folds: int, rng: np.random.Generator) -> list[list]:
    """Shuffle, stratify by (label, dataset) and deal round-robin into folds.

    A single counter runs across strata, so fold sizes differ by at most one
    and each label's count per fold differs by at most one.
    """
    strata: dict[tuple[int, str], list] = {}
    for d, s, lab in subjects:
        strata.setdefault((lab, d), []).append((d, s, lab))
    folds: list[list] = [[] for _ in range(n_folds)]
    i = 0
    for key in sorted(strata):
        members = sorted(strata[key])
        for j in rng.permutation(len(members)):
            folds[i % n_folds].append(members[j])
            i += 1
    return folds


def nlnso_splits(subjects, n_outer: int, n_inner: int, seed: int = 42) -> list[SplitPlan]:
    """All ``n_outer * n_inner`` train/validation/test triplets, ordered by (outer, inner)."""
    subjects = [(str(d), str(s), int(lab)) for d, s, lab in subjects]
    if len({(d, s) for d, s, _ in subjects}) != len(subjects):
        raise ProtocolError("duplicate subject key")
    if n_outer < 2 or n_inner < 2:
        raise ProtocolError("need at least two outer and two inner folds")
    if len(subjects) < n_outer + n_inner:
        raise ProtocolError(f"{len(subjects)} subjects cannot fill {n_outer} x {n_inner} folds")
    rng = np.random.default_rng(seed)
    outer = _deal(subjects, n_outer, rng)
    plans = []
    for o, test in enumerate(outer):
        rest = [s for f, fold in enumerate(outer) if f != o for s in fold]
        inner = _deal(rest, n_inner, rng)
        test_keys = frozenset((d, s) for d, s, _ in test)
        for i, val in enumerate(inner):
            val_keys = frozenset((d, s) for d, s, _ in val)
            train_keys = frozenset((d, s) for d, s, _ in rest) - val_keys
            plan = SplitPlan(o, i, test_keys, val_keys, train_keys)
            plan.validate()
            plans.append(plan)
    return plans


def save_splits(plans: list[SplitPlan], path) -> None:
    from pathlib import Path

    Path(path).write_text(json.dumps([p.to_dict() for p in plans], indent=1))


def load_splits(path, all_subjects=None) -> list[SplitPlan]:
    from pathlib import Path

    plans = [SplitPlan.from_dict(d) for d in json.loads(Path(path).read_text())]
    for p in plans:
        p.validate(all_subjects)
    return plans


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true).astype(bool).ravel()
        p = np.asarray(y_pred).astype(bool).ravel()
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise UndefinedMetricError("balanced accuracy needs both classes present")
    return (cm.tp / (cm.tp + cm.fn) + cm.tn / (cm.tn + cm.fp)) / 2


def weighted_f1(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("empty confusion matrix")

    def f1(tp, fp, fn):
        denom = 2 * tp + fp + fn
        return 0.0 if denom == 0 else 2 * tp / denom

    pos_support = cm.tp + cm.fn
    neg_support = cm.tn + cm.fp
    return (pos_support * f1(cm.tp, cm.fp, cm.fn) + neg_support * f1(cm.tn, cm.fn, cm.fp)) / cm.total


def cohens_kappa(cm: ConfusionMatrix) -> float:
    n = cm.total
    if n == 0:
        raise UndefinedMetricError("empty confusion matrix")
    p_o = (cm.tp + cm.tn) / n
    p_e = ((cm.tp + cm.fn) * (cm.tp + cm.fp) + (cm.tn + cm.fp) * (cm.tn + cm.fn)) / (n * n)
    if p_e == 1:
        raise UndefinedMetricError("chance agreement is 1; kappa undefined")
    return (p_o - p_e) / (1 - p_e)


def balanced_accuracy_at(probs, labels, threshold: float = 0.5) -> float:
    probs = np.asarray(probs).ravel()
    return balanced_accuracy(ConfusionMatrix.from_predictions(labels, probs >= threshold))


@dataclass(frozen=True)
class MetricsReport:
    balanced_accuracy: float
    f1_weighted: float
    cohens_kappa: float
    threshold_used: float
    n_samples: int
    confusion: ConfusionMatrix


def metrics_report(probs, labels, threshold: float = 0.5) -> MetricsReport:
    probs = np.asarray(probs).ravel()
    cm = ConfusionMatrix.from_predictions(labels, probs >= threshold)
    return MetricsReport(balanced_accuracy(cm), weighted_f1(cm), cohens_kappa(cm),
                         float(threshold), cm.total, cm)


# ---------------------------------------------------------------------------
# threshold correction and recording-level aggregation


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    balanced_accuracy: float
    default_balanced_accuracy: float


def _require_both(labels) -> np.ndarray:
    labels = np.asarray(labels).astype(int).ravel()
    if labels.min(initial=1) == labels.max(initial=0) or len(np.unique(labels)) < 2:
        raise UndefinedMetricError("threshold search needs both classes in the validation set")
    return labels


def _argmax_closest(cands: np.ndarray, scores: np.ndarray, anchor: float) -> int:
    best = scores.max()
    tied = np.flatnonzero(scores == best)
    # closest to the anchor, then smaller
    return int(min(tied, key=lambda i: (abs(cands[i] - anchor), cands[i])))


def optimize_threshold(val_probs, val_labels) -> ThresholdResult:
    """Threshold maximizing validation balanced accuracy (positive iff p >= threshold).

    Candidates are the midpoints between consecutive distinct probabilities
    plus 0, 0.5 and 1, which covers every distinct decision rule.
    """
    labels = _require_both(val_labels)
    probs = np.asarray(val_probs, dtype=np.float64).ravel()
    u = np.unique(probs)
    cands = np.unique(np.concatenate([(u[:-1] + u[1:]) / 2, [0.0, 0.5, 1.0]]))
    scores = np.array([balanced_accuracy_at(probs, labels, c) for c in cands])
    i = _argmax_closest(cands, scores, 0.5)
    return ThresholdResult(float(cands[i]), float(scores[i]), balanced_accuracy_at(probs, labels, 0.5))


def positive_fraction(window_probs) -> float:
    w = np.asarray(window_probs, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("a recording needs at least one window")
    return float(np.mean(w >= 0.5))


def aggregate_recording(window_probs, min_ratio: float) -> int:
    """1 iff the share of windows with p >= 0.5 reaches ``min_ratio``."""
    return int(positive_fraction(window_probs) >= min_ratio)


def recording_balanced_accuracy(fractions, labels, ratio: float) -> float:
    preds = np.asarray(fractions) >= ratio
    return balanced_accuracy(ConfusionMatrix.from_predictions(labels, preds))


def calibrate_min_ratio(recordings) -> float:
    """Minimal positive-window ratio maximizing recording-level validation balanced accuracy.

    ``recordings`` is an iterable of ``(window_probs, label)``. Ties go to the
    smallest ratio.
    """
    recordings = list(recordings)
    fracs = np.array([positive_fraction(p) for p, _ in recordings])
    labels = _require_both([lab for _, lab in recordings])
    cands = np.unique(np.concatenate([fracs, [0.0, 1.0]]))
    scores = np.array([recording_balanced_accuracy(fracs, labels, c) for c in cands])
    return float(cands[np.flatnonzero(scores == scores.max())[0]])


# ---------------------------------------------------------------------------
# cross-split summary


@dataclass(frozen=True)
class MetricSummary:
    median: float
    iqr: float
    p1: float
    p99: float
    min: float
    max: float

    @property
    def percentile_range(self) -> float:
        return self.p99 - self.p1


def summarize(values) -> MetricSummary:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    p1, p25, p50, p75, p99 = np.percentile(v, [1, 25, 50, 75, 99])
    return MetricSummary(float(p50), float(p75 - p25), float(p1), float(p99), float(v.min()), float(v.max()))


def summarize_nlnso(per_split: list[dict], metrics=("bal_acc", "f1_w", "kappa")) -> dict[str, MetricSummary]:
    return {m: summarize([row[m] for row in per_split]) for m in metrics}
