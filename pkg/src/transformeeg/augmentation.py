"""Signal-domain augmentations for EEG windows, their composition, and ARIS.

Every transform maps a ``(C, N)`` array (or a stack ``(..., C, N)`` where
noted) to an array of the same shape. Randomized transforms take an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import signal as sps

from .pchip import pchip_interpolate


class AugmentationError(ValueError):
    pass


class Kind(str, Enum):
    TIME_REVERSE = "TimeReverse"
    SIGN_FLIP = "SignFlip"
    BAND_NOISE = "BandNoise"
    SIGNAL_DRIFT = "SignalDrift"
    SNR_SCALING = "SnrScaling"
    CHANNEL_DROPOUT = "ChannelDropout"
    MASKING = "Masking"
    SIGNAL_WARP = "SignalWarp"
    PHASE_RANDOMIZER = "PhaseRandomizer"
    PHASE_SWAP = "PhaseSwap"


EEG_BANDS = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
    "gamma_low": (30.0, 45.0),
}

# hyperparameter ranges drawn at every call
BAND_NOISE_SIGMA = (0.8, 0.9)
DRIFT_SLOPES = (-0.5, -0.4, -0.3, 0.3, 0.4, 0.5)
SNR_DB = (8.0, 10.0)
DROPOUT_CHANNELS = (4, 16)
MASK_BLOCKS = (3, 4, 5)
MASK_RATIO = (0.2, 0.35)
WARP_SEGMENTS = (6, 7, 8)
WARP_STRETCH = (1.25, 1.50)
WARP_SQUEEZE = 1.0
PHASE_STRENGTH = 0.9


# ---------------------------------------------------------------------------
# deterministic transforms


def time_reverse(X):
    return np.asarray(X)[..., ::-1].copy()


def sign_flip(X):
    return -np.asarray(X)


def signal_drift(X, m: float):
    """Add a linear ramp rising by ``m`` over the window: ``x + (m/N) t``."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[-1]
    return X + (m / n) * np.arange(n)


def phase_swap(Xi, Xj):
    """Amplitude spectrum of ``Xi`` combined with the phase spectrum of ``Xj``, per channel."""
    Xi = np.asarray(Xi, dtype=np.float64)
    Xj = np.asarray(Xj, dtype=np.float64)
    if Xi.shape != Xj.shape:
        raise AugmentationError(f"phase swap needs equal shapes, got {Xi.shape} and {Xj.shape}")
    Fi = np.fft.fft(Xi, axis=-1)
    Fj = np.fft.fft(Xj, axis=-1)
    return np.real(np.fft.ifft(np.abs(Fi) * np.exp(1j * np.angle(Fj)), axis=-1))


# ---------------------------------------------------------------------------
# randomized transforms


def bandpass_fir(band: str, fs: float, n: int) -> np.ndarray:
    """Hamming windowed-sinc band-pass, order ``4 fs / f_low`` capped at ``n/4``."""
    if band not in EEG_BANDS:
        raise AugmentationError(f"unknown band {band!r}; choose from {sorted(EEG_BANDS)}")
    lo, hi = EEG_BANDS[band]
    if hi >= fs / 2:
        raise AugmentationError(f"band {band} ({lo}-{hi} Hz) exceeds Nyquist {fs / 2} Hz")
    order = min(int(4 * fs / lo), n // 4)
    order -= order % 2
    if order < 2:
        raise AugmentationError(f"window of {n} samples too short for a band-pass filter")
    return sps.firwin(order + 1, [lo, hi], pass_zero=False, fs=fs)


def band_noise(X, band: str, sigma: float, rng: np.random.Generator, fs: float = 125.0):
    X = np.asarray(X, dtype=np.float64)
    h = bandpass_fir(band, fs, X.shape[-1])
    eps = sigma * rng.standard_normal(X.shape)
    # forward-backward pass: zero phase, no group delay
    noise = sps.filtfilt(h, [1.0], eps, axis=-1, padlen=min(3 * len(h), X.shape[-1] - 1))
    return X + noise


def snr_scale_factor(X, snr_db: float) -> float:
    X = np.asarray(X, dtype=np.float64)
    rms = math.sqrt(float(np.mean(X * X)))
    if rms == 0:
        raise AugmentationError("SNR scaling is undefined for an all-zero window")
    return 10 ** (-snr_db / 20) * rms


def snr_scaling(X, snr_db: float, rng: np.random.Generator):
    X = np.asarray(X, dtype=np.float64)
    k = snr_scale_factor(X, snr_db)
    return X + k * rng.standard_normal(X.shape)


def channel_dropout(X, n: int, rng: np.random.Generator):
    X = np.asarray(X, dtype=np.float64)
    c = X.shape[-2]
    if not 0 <= n <= c:
        raise AugmentationError(f"cannot drop {n} of {c} channels")
    out = X.copy()
    out[..., rng.choice(c, size=n, replace=False), :] = 0.0
    return out


def masked_count(n: int, p: float) -> int:
    # tolerance keeps e.g. 100 * 0.29 from flooring to 28
    return math.floor(n * p + 1e-9)


def masking_vector(n: int, k: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 mask of length ``n`` with exactly ``k`` zero-runs totalling ``floor(n p)`` zeros."""
    if k < 1 or not 0 < p < 1:
        raise AugmentationError(f"need k >= 1 and 0 < p < 1, got k={k}, p={p}")
    zeros = masked_count(n, p)
    ones = n - zeros
    if zeros < k or ones < k - 1:
        raise AugmentationError(f"cannot place {k} masked blocks covering {zeros} of {n} samples")
    # zero-run lengths: random composition of `zeros` into k positive parts
    cuts = np.sort(rng.choice(np.arange(1, zeros), size=k - 1, replace=False)) if k > 1 else np.array([], int)
    zero_runs = np.diff(np.concatenate([[0], cuts, [zeros]]))
    # one-runs: k+1 gaps, interior ones at least 1 long; stars and bars on the slack
    slack = ones - (k - 1)
    bars = np.sort(rng.choice(np.arange(slack + k), size=k, replace=False))
    gaps = np.diff(np.concatenate([[-1], bars, [slack + k]])) - 1
    gaps[1:-1] += 1
    m = np.empty(n)
    pos = 0
    for i in range(k):
        m[pos:pos + gaps[i]] = 1.0
        pos += gaps[i]
        m[pos:pos + zero_runs[i]] = 0.0
        pos += zero_runs[i]
    m[pos:] = 1.0
    return m


def masking(X, k: int, p: float, rng: np.random.Generator):
    X = np.asarray(X, dtype=np.float64)
    return X * masking_vector(X.shape[-1], k, p, rng)


def warp_grid(n: int, n_segments: int, k_st: float, k_sq: float,
              rng: np.random.Generator) -> np.ndarray:
    """Non-uniform sample positions on ``[0, n-1]`` for the warp.

    Segments chosen for stretching get local spacing divided by a factor
    drawn in ``[min(1.25, k_st), k_st]``; the rest get spacing divided by
    ``k_sq``.
    """
    if n_segments < 2 or n_segments > n - 1:
        raise AugmentationError(f"n_segments must lie in [2, {n - 1}], got {n_segments}")
    if k_st < 1 or not 0 < k_sq <= 1:
        raise AugmentationError(f"need k_st >= 1 and 0 < k_sq <= 1, got {k_st}, {k_sq}")
    edges = np.round(np.linspace(0, n - 1, n_segments + 1)).astype(int)
    n_stretch = int(rng.integers(1, n_segments // 2 + 1))
    stretched = rng.choice(n_segments, size=n_stretch, replace=False)
    factors = np.full(n_segments, float(k_sq))
    factors[stretched] = rng.uniform(min(1.25, k_st), k_st, size=n_stretch)
    pieces = []
    for s in range(n_segments):
        a, b = edges[s], edges[s + 1]
        steps = max(1, int(round((b - a) * factors[s])))
        pieces.append(np.linspace(a, b, steps + 1)[:-1])
    pieces.append(np.array([float(n - 1)]))
    return np.concatenate(pieces)


def signal_warp(X, n_segments: int, k_st: float, k_sq: float, rng: np.random.Generator):
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[-1]
    t_old = np.arange(n, dtype=np.float64)
    t_nu = warp_grid(n, n_segments, k_st, k_sq, rng)
    warped = pchip_interpolate(X, t_old, t_nu)
    # warped samples are read as evenly spaced over the original span
    t_u = np.linspace(0.0, n - 1, t_nu.size)
    return pchip_interpolate(warped, t_u, t_old)


def phase_randomizer(X, s: float, rng: np.random.Generator):
    """Rotate every frequency bin by ``s * phi``; one ``phi`` shared by all channels."""
    if not 0 <= s <= 1:
        raise AugmentationError(f"phase strength must lie in [0, 1], got {s}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[-1]
    phi = rng.uniform(0, 2 * np.pi, size=n)
    phi[0] = 0.0
    if n % 2 == 0:
        phi[n // 2] = 0.0
    F = np.fft.fft(X, axis=-1)
    return np.real(np.fft.ifft(F * np.exp(1j * s * phi), axis=-1))


# ---------------------------------------------------------------------------
# specs and composition


@dataclass
class AugmentationSpec:
    """One augmentation kind. ``params`` pins hyperparameters; missing ones are drawn per call."""

    kind: Kind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind(self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        d = dict(d)
        return cls(Kind(d.pop("kind")), d)


def sample_params(kind: Kind, rng: np.random.Generator, n_channels: int = 32) -> dict:
    kind = Kind(kind)
    if kind is Kind.BAND_NOISE:
        return {"band": str(rng.choice(list(EEG_BANDS))), "sigma": float(rng.uniform(*BAND_NOISE_SIGMA))}
    if kind is Kind.SIGNAL_DRIFT:
        return {"m": float(rng.choice(DRIFT_SLOPES))}
    if kind is Kind.SNR_SCALING:
        return {"snr_db": float(rng.uniform(*SNR_DB))}
    if kind is Kind.CHANNEL_DROPOUT:
        lo, hi = min(DROPOUT_CHANNELS[0], n_channels), min(DROPOUT_CHANNELS[1], n_channels)
        return {"n": int(rng.integers(lo, hi + 1))}
    if kind is Kind.MASKING:
        return {"k": int(rng.choice(MASK_BLOCKS)), "p": float(rng.uniform(*MASK_RATIO))}
    if kind is Kind.SIGNAL_WARP:
        return {"n_segments": int(rng.choice(WARP_SEGMENTS)),
                "k_st": float(rng.uniform(*WARP_STRETCH)), "k_sq": WARP_SQUEEZE}
    if kind is Kind.PHASE_RANDOMIZER:
        return {"s": PHASE_STRENGTH}
    return {}


def apply_single(kind: Kind, X, params: dict, rng: np.random.Generator, fs: float = 125.0):
    """Apply one non-pairing transform to a ``(C, N)`` window."""
    kind = Kind(kind)
    if kind is Kind.TIME_REVERSE:
        return time_reverse(X)
    if kind is Kind.SIGN_FLIP:
        return sign_flip(X)
    if kind is Kind.BAND_NOISE:
        return band_noise(X, params["band"], params["sigma"], rng, fs)
    if kind is Kind.SIGNAL_DRIFT:
        return signal_drift(X, params["m"])
    if kind is Kind.SNR_SCALING:
        return snr_scaling(X, params["snr_db"], rng)
    if kind is Kind.CHANNEL_DROPOUT:
        return channel_dropout(X, params["n"], rng)
    if kind is Kind.MASKING:
        return masking(X, params["k"], params["p"], rng)
    if kind is Kind.SIGNAL_WARP:
        return signal_warp(X, params["n_segments"], params["k_st"], params["k_sq"], rng)
    if kind is Kind.PHASE_RANDOMIZER:
        return phase_randomizer(X, params["s"], rng)
    raise AugmentationError(f"{kind.value} operates on a batch, not a single window")


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise AugmentationError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _partners(labels, rng, same_class: bool) -> np.ndarray:
    n = len(labels)
    if not same_class:
        return derangement(n, rng) if n > 1 else np.arange(n)
    partner = np.arange(n)
    labels = np.asarray(labels)
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if idx.size > 1:
            partner[idx] = idx[derangement(idx.size, rng)]
    return partner


def apply_spec_to_batch(spec: AugmentationSpec, X: np.ndarray, rng: np.random.Generator,
                        fs: float = 125.0, labels=None, same_class_swap: bool = False) -> np.ndarray:
    """Apply one spec to a ``(B, C, N)`` batch; hyperparameters are drawn once per call."""
    params = {**sample_params(spec.kind, rng, X.shape[1]), **spec.params}
    if spec.kind is Kind.PHASE_SWAP:
        labels = np.zeros(len(X)) if labels is None else labels
        partner = _partners(labels, rng, same_class_swap)
        out = X.copy()
        moved = partner != np.arange(len(X))
        if np.any(moved):
            out[moved] = phase_swap(X[moved], X[partner[moved]])
        return out
    return np.stack([apply_single(spec.kind, x, params, rng, fs) for x in X])


@dataclass
class AugComposition:
    first: AugmentationSpec
    second: AugmentationSpec | None = None
    apply_probability: float = 0.75
    same_class_swap: bool = False

    def __post_init__(self):
        if not 0 <= self.apply_probability <= 1:
            raise AugmentationError("apply_probability must lie in [0, 1]")

    @property
    def name(self) -> str:
        parts = [self.first.kind.value] + ([self.second.kind.value] if self.second else [])
        return "+".join(parts)

    def to_dict(self) -> dict:
        return {
            "first": self.first.to_dict(),
            "second": self.second.to_dict() if self.second else None,
            "apply_probability": self.apply_probability,
            "same_class_swap": self.same_class_swap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugComposition":
        return cls(
            AugmentationSpec.from_dict(d["first"]),
            AugmentationSpec.from_dict(d["second"]) if d.get("second") else None,
            float(d.get("apply_probability", 0.75)),
            bool(d.get("same_class_swap", False)),
        )


def load_augmentation_config(text: str) -> tuple[AugComposition, int | None]:
    """Parse ``{"first": ..., "second": ..., "apply_probability": ..., "seed": ...}``."""
    d = json.loads(text)
    return AugComposition.from_dict(d), d.get("seed")


def augment_batch(X: np.ndarray, comp: AugComposition | None, rng: np.random.Generator,
                  fs: float = 125.0, labels=None) -> tuple[np.ndarray, bool]:
    """Augment a ``(B, C, N)`` batch with probability ``comp.apply_probability``.

    Returns the (possibly unchanged) batch and whether augmentation fired.
    """
    if comp is None or rng.random() >= comp.apply_probability:
        return X, False
    out = np.asarray(X, dtype=np.float64)
    for spec in (comp.first, comp.second):
        if spec is not None:
            out = apply_spec_to_batch(spec, out, rng, fs, labels, comp.same_class_swap)
    return out, True


def compose_and_apply(batch, comp: AugComposition, rng: np.random.Generator):
    """Window-list front end to :func:`augment_batch`; returns new window objects."""
    from .signal_data import EegWindow

    if not batch:
        raise AugmentationError("cannot augment an empty batch")
    X = np.stack([w.data for w in batch]).astype(np.float64)
    fs = batch[0].meta.sampling_rate
    labels = [w.label for w in batch]
    out, _ = augment_batch(X, comp, rng, fs, labels)
    return [EegWindow(w.meta, w.window_index, x, w.recording_id) for w, x in zip(batch, out)]


ALL_KINDS = tuple(Kind)


def all_compositions() -> list[tuple[Kind, Kind | None]]:
    """The 100 candidate configurations: each kind alone plus every ordered pair of distinct kinds."""
    combos: list[tuple[Kind, Kind | None]] = [(k, None) for k in ALL_KINDS]
    combos += [(a, b) for a in ALL_KINDS for b in ALL_KINDS if a != b]
    return combos


# ---------------------------------------------------------------------------
# ARIS


@dataclass(frozen=True)
class AriInputs:
    baseline_median: float
    median: float
    baseline_iqr: float
    iqr: float


def aris(a: AriInputs) -> float:
    """Augmentation relative improvement score.

    Zero unless both the median rises and the IQR shrinks relative to the
    baseline; otherwise the product of the two relative changes.
    """
    if a.baseline_median <= 0 or a.baseline_iqr <= 0:
        raise AugmentationError("baseline median and IQR must be positive")
    if min(a.median, a.iqr) < 0:
        raise AugmentationError("median and IQR must be non-negative")
    if a.baseline_median > a.median or a.baseline_iqr < a.iqr:
        return 0.0
    score = ((a.baseline_median - a.median) / a.baseline_median) * ((a.iqr - a.baseline_iqr) / a.baseline_iqr)
    return score + 0.0  # no negative zero when a factor vanishes
