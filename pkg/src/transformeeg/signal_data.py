"""EEG recordings, windows, the EEGW binary format and the preprocessing tail.

Ingested signals are assumed to be already cleaned upstream (filtered to
1-45 Hz, re-referenced, channel-selected). This module only performs the
last three steps before training: decimation, per-channel z-scoring and
window extraction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"EEGW"
VERSION = 1
# magic, version, reserved, fs, n_channels, n_samples, label
_HEADER = struct.Struct("<4sHHfIQB")
_STR_LEN = struct.Struct("<H")

HEALTHY = 0
PARKINSONS = 1

# Upper edge of the upstream band-pass; decimation must keep it below Nyquist.
UPSTREAM_LOWPASS_HZ = 45.0


class EegFormatError(ValueError):
    """Bad magic, unsupported version or malformed header."""


class EegLengthError(EegFormatError):
    """Payload shorter (or longer) than the header announces."""


class EegDataError(ValueError):
    """Non-finite samples or a degenerate channel."""


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class RecordingMeta:
    subject_id: str
    dataset_id: str
    label: int
    sampling_rate: float
    n_channels: int
    n_samples: int

    def __post_init__(self):
        if self.label not in (HEALTHY, PARKINSONS):
            raise ParameterError(f"label must be 0 or 1, got {self.label}")
        if self.n_channels < 1 or self.n_samples < 1:
            raise ParameterError("n_channels and n_samples must be >= 1")
        if not self.sampling_rate > 0:
            raise ParameterError("sampling_rate must be positive")

    @property
    def subject_key(self) -> tuple[str, str]:
        return (self.dataset_id, self.subject_id)


@dataclass
class EegRecording:
    meta: RecordingMeta
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.meta.n_channels, self.meta.n_samples):
            raise EegDataError(
                f"data shape {self.data.shape} does not match meta "
                f"({self.meta.n_channels}, {self.meta.n_samples})"
            )
        if not np.all(np.isfinite(self.data)):
            raise EegDataError("recording contains non-finite values")


@dataclass
class EegWindow:
    meta: RecordingMeta
    window_index: int
    data: np.ndarray
    recording_id: str = ""

    @property
    def label(self) -> int:
        return self.meta.label


@dataclass
class DatasetManifest:
    entries: list[tuple[str, RecordingMeta]] = field(default_factory=list)
    window_length_s: float = 16.0
    overlap_fraction: float = 0.25

    def __post_init__(self):
        keys = [(m.subject_id, m.dataset_id, p) for p, m in self.entries]
        if len(set(keys)) != len(keys):
            raise ParameterError("duplicate (subject, dataset, path) entry in manifest")

    def to_json(self) -> str:
        rows = [
            {
                "path": p,
                "subject": m.subject_id,
                "dataset": m.dataset_id,
                "label": m.label,
                "fs": m.sampling_rate,
                "channels": m.n_channels,
                "samples": m.n_samples,
            }
            for p, m in self.entries
        ]
        return json.dumps(rows, indent=1)

    @classmethod
    def from_json(cls, text: str, window_length_s: float = 16.0,
                  overlap_fraction: float = 0.25) -> "DatasetManifest":
        rows = json.loads(text)
        if not isinstance(rows, list):
            raise EegFormatError("manifest must be a JSON array")
        entries = []
        for r in rows:
            try:
                meta = RecordingMeta(
                    subject_id=str(r["subject"]),
                    dataset_id=str(r["dataset"]),
                    label=int(r["label"]),
                    sampling_rate=float(r["fs"]),
                    n_channels=int(r["channels"]),
                    n_samples=int(r["samples"]),
                )
            except KeyError as e:
                raise EegFormatError(f"manifest entry missing field {e}") from None
            entries.append((str(r["path"]), meta))
        return cls(entries, window_length_s, overlap_fraction)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, **kw) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(), **kw)


@dataclass(frozen=True)
class ClassSignalRule:
    frequency_hz: float
    amplitude: float = 1.0
    noise_level: float = 1.0


@dataclass(frozen=True)
class SyntheticCohortSpec:
    n_subjects_per_class: int = 16
    recording_length_s: float = 40.0
    sampling_rate: float = 125.0
    n_channels: int = 8
    # healthy: alpha-band rhythm, parkinsons: slowed theta-band rhythm
    class_signal_rules: tuple[ClassSignalRule, ClassSignalRule] = (
        ClassSignalRule(10.0, 1.0, 1.0),
        ClassSignalRule(6.0, 1.0, 1.0),
    )
    dataset_id: str = "synth"
    seed: int = 42

    def __post_init__(self):
        nyq = self.sampling_rate / 2
        for rule in self.class_signal_rules:
            if not 0 < rule.frequency_hz < nyq:
                raise ParameterError(
                    f"class frequency {rule.frequency_hz} Hz must lie in (0, {nyq}) Hz"
                )
        if self.n_subjects_per_class < 0:
            raise ParameterError("n_subjects_per_class must be >= 0")


# ---------------------------------------------------------------------------
# EEGW binary format


def encode_recording(rec: EegRecording) -> bytes:
    m = rec.meta
    subj = m.subject_id.encode("utf-8")
    dset = m.dataset_id.encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, 0, m.sampling_rate, m.n_channels, m.n_samples, m.label),
        _STR_LEN.pack(len(subj)), subj,
        _STR_LEN.pack(len(dset)), dset,
        np.ascontiguousarray(rec.data, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_recording(buf: bytes) -> EegRecording:
    if len(buf) < _HEADER.size:
        raise EegLengthError("file shorter than the EEGW header")
    magic, version, _reserved, fs, n_ch, n_s, label = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise EegFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EegFormatError(f"unsupported EEGW version {version}")
    pos = _HEADER.size
    strings = []
    for _ in range(2):
        if len(buf) < pos + _STR_LEN.size:
            raise EegLengthError("truncated header string")
        (n,) = _STR_LEN.unpack_from(buf, pos)
        pos += _STR_LEN.size
        if len(buf) < pos + n:
            raise EegLengthError("truncated header string")
        strings.append(buf[pos:pos + n].decode("utf-8"))
        pos += n
    expected = n_ch * n_s * 4
    if len(buf) - pos != expected:
        raise EegLengthError(
            f"payload has {len(buf) - pos} bytes, header announces {expected}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n_ch * n_s, offset=pos)
    data = data.reshape(n_ch, n_s).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise EegDataError("recording payload contains non-finite values")
    try:
        meta = RecordingMeta(strings[0], strings[1], label, float(fs), n_ch, n_s)
    except ParameterError as e:
        raise EegFormatError(str(e)) from None
    return EegRecording(meta, data)


def write_recording(rec: EegRecording, path) -> None:
    Path(path).write_bytes(encode_recording(rec))


def read_recording(path) -> EegRecording:
    return decode_recording(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# preprocessing tail


def downsample(rec: EegRecording, factor: int, force: bool = False) -> EegRecording:
    """Plain decimation: keep every ``factor``-th sample starting at 0.

    No anti-alias filter is applied. Unless ``force`` is set, factors that
    push the upstream 45 Hz low-pass edge above the new Nyquist are refused.
    """
    if factor < 1:
        raise ParameterError(f"downsampling factor must be >= 1, got {factor}")
    m = rec.meta
    if factor > m.n_samples:
        raise ParameterError("factor exceeds the number of samples")
    new_fs = m.sampling_rate / factor
    if not force and factor > 1 and UPSTREAM_LOWPASS_HZ >= new_fs / 2:
        raise ParameterError(
            f"decimating to {new_fs} Hz aliases the {UPSTREAM_LOWPASS_HZ} Hz band edge; "
            "pass force=True to override"
        )
    n_out = m.n_samples // factor
    data = rec.data[:, : n_out * factor : factor].copy()
    return EegRecording(replace(m, sampling_rate=new_fs, n_samples=n_out), data)


def standardize(rec: EegRecording) -> EegRecording:
    # population std (ddof=0) over the whole recording, per channel
    x = np.asarray(rec.data, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    bad = np.flatnonzero(sd[:, 0] == 0)
    if bad.size:
        raise EegDataError(f"channel {int(bad[0])} has zero variance")
    return EegRecording(rec.meta, (x - mu) / sd)


def window_starts(n_samples: int, window: int, stride: int) -> np.ndarray:
    if n_samples < window:
        return np.zeros(0, dtype=int)
    count = (n_samples - window) // stride + 1
    return np.arange(count) * stride


def window_geometry(length_s: float, overlap_fraction: float, fs: float) -> tuple[int, int]:
    """Return (samples per window, stride in samples), validating integrality."""
    if not 0 <= overlap_fraction < 1:
        raise ParameterError("overlap_fraction must lie in [0, 1)")
    n = length_s * fs
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ParameterError(f"window of {length_s} s at {fs} Hz is not a whole number of samples")
    n = int(round(n))
    stride = n * (1 - overlap_fraction)
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise ParameterError(f"stride {stride} samples is not a positive integer")
    return n, int(round(stride))


def extract_windows(rec: EegRecording, length_s: float, overlap_fraction: float,
                    recording_id: str = "") -> list[EegWindow]:
    n, stride = window_geometry(length_s, overlap_fraction, rec.meta.sampling_rate)
    starts = window_starts(rec.meta.n_samples, n, stride)
    return [
        EegWindow(rec.meta, i, rec.data[:, s:s + n].copy(), recording_id)
        for i, s in enumerate(starts)
    ]


def prepare_windows(rec: EegRecording, length_s: float, overlap_fraction: float,
                    recording_id: str = "", downsample_factor: int = 1) -> list[EegWindow]:
    """Decimate (optionally), z-score, then cut windows, in that order."""
    if downsample_factor != 1:
        rec = downsample(rec, downsample_factor)
    return extract_windows(standardize(rec), length_s, overlap_fraction, recording_id)


def stack_windows(windows: list[EegWindow]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([w.data for w in windows]).astype(np.float64)
    y = np.array([w.label for w in windows], dtype=np.float64)
    return X, y


# ---------------------------------------------------------------------------
# synthetic cohort


def generate_synthetic_cohort(spec: SyntheticCohortSpec) -> tuple[DatasetManifest, list[EegRecording]]:
    """Deterministic two-class cohort: one oscillation per class plus white noise.

    Every channel carries the class oscillation with its own random phase and
    a small random amplitude jitter, so windows are separable by spectrum but
    not by any single sample value.
    """
    if spec.n_subjects_per_class < 1:
        raise EegDataError("empty manifest: the cohort needs at least one subject per class")
    rng = np.random.default_rng(spec.seed)
    fs = spec.sampling_rate
    n = int(round(spec.recording_length_s * fs))
    if n < 1:
        raise ParameterError("recording_length_s too short for one sample")
    t = np.arange(n) / fs
    entries, recs = [], []
    for label in (HEALTHY, PARKINSONS):
        rule = spec.class_signal_rules[label]
        for i in range(spec.n_subjects_per_class):
            sid = f"{'hc' if label == HEALTHY else 'pd'}{i:03d}"
            phase = rng.uniform(0, 2 * np.pi, size=(spec.n_channels, 1))
            gain = rule.amplitude * rng.uniform(0.8, 1.2, size=(spec.n_channels, 1))
            noise = rng.standard_normal((spec.n_channels, n))
            data = gain * np.sin(2 * np.pi * rule.frequency_hz * t + phase) + rule.noise_level * noise
            meta = RecordingMeta(sid, spec.dataset_id, label, fs, spec.n_channels, n)
            recs.append(EegRecording(meta, data.astype(np.float32)))
            entries.append((f"{spec.dataset_id}_{sid}.eegw", meta))
    return DatasetManifest(entries), recs


def bandpower(x: np.ndarray, fs: float, lo: float, hi: float) -> np.ndarray:
    """Periodogram power in [lo, hi] Hz along the last axis."""
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    freqs = np.fft.rfftfreq(x.shape[-1], d=1 / fs)
    sel = (freqs >= lo) & (freqs <= hi)
    return spec[..., sel].sum(axis=-1)


def write_cohort(manifest: DatasetManifest, recs: list[EegRecording], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for (p, _), rec in zip(manifest.entries, recs):
        write_recording(rec, out / p)
    mpath = out / "manifest.json"
    manifest.save(mpath)
    return mpath


def load_cohort(manifest_path, window_length_s: float, overlap_fraction: float,
                downsample_factor: int = 1) -> tuple[DatasetManifest, list[EegWindow]]:
    """Read every manifest entry (paths relative to the manifest) and window it."""
    mpath = Path(manifest_path)
    manifest = DatasetManifest.load(mpath, window_length_s=window_length_s,
                                    overlap_fraction=overlap_fraction)
    if not manifest.entries:
        raise EegDataError(f"{mpath}: empty manifest")
    windows: list[EegWindow] = []
    for p, meta in manifest.entries:
        fp = Path(p) if Path(p).is_absolute() else mpath.parent / p
        rec = read_recording(fp)
        if rec.meta.subject_key != meta.subject_key or rec.meta.label != meta.label:
            raise EegFormatError(f"{fp}: header disagrees with manifest entry")
        windows.extend(prepare_windows(rec, window_length_s, overlap_fraction,
                                       recording_id=p, downsample_factor=downsample_factor))
    return manifest, windows


def subjects_of(windows: list[EegWindow]) -> list[tuple[str, str, int]]:
    seen: dict[tuple[str, str], int] = {}
    for w in windows:
        seen.setdefault(w.meta.subject_key, w.label)
    return [(d, s, lab) for (d, s), lab in seen.items()]


def n_windows(n_samples: int, window: int, stride: int) -> int:
    return 0 if n_samples < window else math.floor((n_samples - window) / stride) + 1
