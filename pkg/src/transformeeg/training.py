"""Deterministic training: BCE, Adam, exponential learning-rate decay, early stopping."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .augmentation import AugComposition, augment_batch
from .evaluation import ProtocolError, balanced_accuracy_at
from .model import (
    ModelParams,
    NumericalError,
    bce_loss,
    loss_and_grads,
    predict_proba,
    update_running_stats,
)

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "AdamState", "TrainRecord", "bce_loss", "lr_at_epoch",
           "adam_step", "fit", "train_split", "split_seed"]


@dataclass
class TrainConfig:
    beta1: float = 0.75
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr0: float = 2.5e-4
    gamma: float = 0.99
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 20
    seed: int = 42
    augmentation: AugComposition | None = None
    bn_momentum: float = 0.1
    sampling_rate: float = 125.0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugComposition.from_dict(self.augmentation)
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.weight_decay != 0:
            raise ValueError("weight decay is not supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict() if self.augmentation else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at_epoch(lr0: float, gamma: float, i: int) -> float:
    return lr0 * gamma ** i


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.75, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``weights`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        weights[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_balacc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    augmented_batches: int = 0
    total_batches: int = 0

    @property
    def effective_training_epochs(self) -> int:
        return self.best_epoch

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_balacc", "lr"])
        for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_balacc, self.lr)):
            w.writerow([i + 1, *(repr(float(x)) for x in row)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "effective_training_epochs": self.effective_training_epochs,
            "stopped_epoch": self.stopped_epoch,
            "best_val_loss": self.val_loss[self.best_epoch - 1] if self.best_epoch else None,
            "augmented_batches": self.augmented_batches,
            "total_batches": self.total_batches,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def split_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *keys])


def fit(params: ModelParams, X_train, y_train, X_val, y_val, cfg: TrainConfig,
        seed_seq: np.random.SeedSequence | None = None) -> tuple[ModelParams, TrainRecord]:
    """Train on arrays; returns the weights of the epoch with the lowest validation loss."""
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ProtocolError("training and validation sets must be nonempty")
    seed_seq = seed_seq or split_seed(cfg.seed)
    shuffle_ss, aug_ss, drop_ss = seed_seq.spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)

    params = params.copy()
    state = AdamState()
    rec = TrainRecord()
    best = params.copy()
    best_loss = np.inf
    n = len(X_train)
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg.lr0, cfg.gamma, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X_train[idx]
            if cfg.augmentation is not None:
                xb, fired = augment_batch(xb, cfg.augmentation, aug_rng, cfg.sampling_rate,
                                          labels=y_train[idx])
                rec.augmented_batches += fired
            rec.total_batches += 1
            loss, grads, stats = loss_and_grads(params, xb, y_train[idx], drop_rng)
            update_running_stats(params, stats, cfg.bn_momentum)
            adam_step(params.weights, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * len(idx)

        p_val = predict_proba(params, X_val)
        vloss = bce_loss(p_val, y_val)
        vbal = balanced_accuracy_at(p_val, y_val, 0.5)
        rec.train_loss.append(total / n)
        rec.val_loss.append(vloss)
        rec.val_balacc.append(vbal)
        rec.lr.append(lr)
        rec.stopped_epoch = epoch + 1
        log.debug("epoch %d train %.4f val %.4f balacc %.3f", epoch + 1, total / n, vloss, vbal)
        if vloss < best_loss:
            best_loss = vloss
            best = params.copy()
            rec.best_epoch = epoch + 1
        elif rec.stopped_epoch - rec.best_epoch >= cfg.patience:
            break
    return best, rec


def train_split(params: ModelParams, train_windows, val_windows, cfg: TrainConfig,
                seed_seq: np.random.SeedSequence | None = None) -> tuple[ModelParams, TrainRecord]:
    """Train on window lists after checking train and validation share no subject."""
    from .signal_data import stack_windows

    tr_subj = {w.meta.subject_key for w in train_windows}
    va_subj = {w.meta.subject_key for w in val_windows}
    overlap = tr_subj & va_subj
    if overlap:
        raise ProtocolError(f"subjects in both train and validation: {sorted(overlap)[:5]}")
    Xtr, ytr = stack_windows(train_windows)
    Xva, yva = stack_windows(val_windows)
    return fit(params, Xtr, ytr, Xva, yva, cfg, seed_seq)
