import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from transformeeg.signal_data import (
    ClassSignalRule,
    DatasetManifest,
    EegDataError,
    EegFormatError,
    EegLengthError,
    EegRecording,
    ParameterError,
    RecordingMeta,
    SyntheticCohortSpec,
    bandpower,
    decode_recording,
    downsample,
    encode_recording,
    extract_windows,
    generate_synthetic_cohort,
    load_cohort,
    n_windows,
    prepare_windows,
    read_recording,
    standardize,
    subjects_of,
    window_starts,
    write_cohort,
    write_recording,
)


def rec_of(data, fs=125.0, label=0, sid="s01", ds="d1"):
    data = np.asarray(data)
    meta = RecordingMeta(sid, ds, label, fs, data.shape[0], data.shape[1])
    return EegRecording(meta, data)


def raw_file(payload, n_ch, n_s, magic=b"EEGW", version=1):
    head = struct.pack("<4sHHfIQB", magic, version, 0, 125.0, n_ch, n_s, 1)
    strings = struct.pack("<H", 3) + b"s01" + struct.pack("<H", 2) + b"d1"
    return head + strings + np.asarray(payload, dtype="<f4").tobytes()


# --- EEGW format -----------------------------------------------------------

def test_payload_layout_is_channel_major():
    rec = decode_recording(raw_file([1, 2, 3, 4, 5, 6, 7, 8], 2, 4))
    np.testing.assert_array_equal(rec.data, [[1, 2, 3, 4], [5, 6, 7, 8]])
    assert rec.meta.label == 1 and rec.meta.subject_id == "s01" and rec.meta.dataset_id == "d1"


def test_bad_magic():
    with pytest.raises(EegFormatError):
        decode_recording(raw_file([1, 2], 1, 2, magic=b"XXXX"))


def test_bad_version():
    with pytest.raises(EegFormatError):
        decode_recording(raw_file([1, 2], 1, 2, version=9))


@pytest.mark.parametrize("cut", [3, 20, 30, -1])
def test_truncated_file(cut):
    buf = raw_file(np.arange(8), 2, 4)
    with pytest.raises(EegLengthError):
        decode_recording(buf[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(EegLengthError):
        decode_recording(raw_file(np.arange(8), 2, 4) + b"\0\0\0\0")


def test_nonfinite_payload_rejected():
    with pytest.raises(EegDataError):
        decode_recording(raw_file([1, np.nan], 1, 2))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)),
       st.text(min_size=1, max_size=8), st.sampled_from([0, 1]))
def test_round_trip_bit_exact(data, sid, label):
    rec = rec_of(data, label=label, sid=sid)
    back = decode_recording(encode_recording(rec))
    assert back.meta == rec.meta
    assert back.data.tobytes() == data.astype("<f4").tobytes()


def test_round_trip_via_file(tmp_path):
    rng = np.random.default_rng(0)
    rec = rec_of(rng.standard_normal((4, 77)).astype(np.float32))
    write_recording(rec, tmp_path / "r.eegw")
    back = read_recording(tmp_path / "r.eegw")
    np.testing.assert_array_equal(back.data, rec.data)


# --- downsample / standardize ----------------------------------------------

def test_downsample_identity_and_arithmetic():
    rng = np.random.default_rng(1)
    rec = rec_of(rng.standard_normal((2, 1000)), fs=250.0)
    same = downsample(rec, 1)
    np.testing.assert_array_equal(same.data, rec.data)
    half = downsample(rec, 2)
    assert half.meta.sampling_rate == 125.0 and half.meta.n_samples == 500


def test_downsample_sinusoid_matches_analytic():
    t = np.arange(1000) / 250.0
    rec = rec_of(np.sin(2 * np.pi * 10 * t)[None], fs=250.0)
    out = downsample(rec, 2)
    t2 = np.arange(500) / 125.0
    assert np.max(np.abs(out.data[0] - np.sin(2 * np.pi * 10 * t2))) < 1e-9


def test_downsample_refuses_aliasing():
    rec = rec_of(np.ones((1, 1000)), fs=125.0)
    with pytest.raises(ParameterError):
        downsample(rec, 2)
    assert downsample(rec, 2, force=True).meta.sampling_rate == 62.5
    with pytest.raises(ParameterError):
        downsample(rec, 0)


def test_standardize_closed_form():
    out = standardize(rec_of([[1.0, 2.0, 3.0]]))
    s = np.sqrt(1.5)
    np.testing.assert_allclose(out.data[0], [-s, 0.0, s], rtol=0, atol=1e-15)


def test_standardize_moments_and_idempotence():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 5.0, (32, 2000))
    once = standardize(rec_of(x))
    assert np.all(np.abs(once.data.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(once.data.std(axis=1) - 1) < 1e-9)
    twice = standardize(once)
    assert np.max(np.abs(twice.data - once.data)) < 1e-12


def test_standardize_commutes_with_time_reverse():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 100))
    a = standardize(rec_of(x)).data[:, ::-1]
    b = standardize(rec_of(x[:, ::-1].copy())).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_zero_variance_channel_named():
    x = np.vstack([np.arange(5.0), np.full(5, 2.0)])
    with pytest.raises(EegDataError, match="channel 1"):
        standardize(rec_of(x))


# --- windows ----------------------------------------------------------------

def test_window_count_300s_recording():
    rec = rec_of(np.zeros((1, 300 * 125)))
    assert len(extract_windows(rec, 16, 0.25)) == 24


def test_three_windows_no_overlap():
    rec = rec_of(np.zeros((1, 3 * 250)))
    assert len(extract_windows(rec, 2, 0.0)) == 3


def test_window_starts_brute_force():
    starts = window_starts(400, 100, 75)
    assert list(starts) == [s for s in range(400) if s % 75 == 0 and s + 100 <= 400]
    assert list(starts) == [0, 75, 150, 225, 300]


@given(st.integers(0, 3000), st.integers(1, 500), st.integers(1, 500))
def test_window_count_formula(n_samples, window, stride):
    brute = sum(1 for s in range(0, n_samples, stride) if s + window <= n_samples)
    assert n_windows(n_samples, window, stride) == brute == len(window_starts(n_samples, window, stride))


def test_window_content_and_identity():
    x = np.arange(2 * 500, dtype=float).reshape(2, 500)
    ws = extract_windows(rec_of(x), 1.0, 0.2, recording_id="r0")
    assert [w.window_index for w in ws] == [0, 1, 2, 3]
    np.testing.assert_array_equal(ws[1].data, x[:, 100:225])
    assert {w.recording_id for w in ws} == {"r0"}


@pytest.mark.parametrize("length, overlap", [(1.003, 0.25), (1.0, 1.0), (1.0, -0.1), (0.016, 0.9)])
def test_bad_window_geometry(length, overlap):
    with pytest.raises(ParameterError):
        extract_windows(rec_of(np.zeros((1, 500))), length, overlap)


def test_short_recording_gives_no_windows():
    assert extract_windows(rec_of(np.zeros((1, 100))), 1.0, 0.0) == []


def test_prepare_windows_standardizes_per_recording():
    rng = np.random.default_rng(4)
    x = rng.normal(10, 3, (2, 1000))
    ws = prepare_windows(rec_of(x), 2.0, 0.0)
    joined = np.concatenate([w.data for w in ws], axis=1)
    np.testing.assert_allclose(joined.mean(axis=1), 0, atol=1e-12)


# --- synthetic cohort ------------------------------------------------------

def test_cohort_deterministic():
    spec = SyntheticCohortSpec(n_subjects_per_class=3, recording_length_s=4)
    m1, r1 = generate_synthetic_cohort(spec)
    m2, r2 = generate_synthetic_cohort(spec)
    assert m1.to_json() == m2.to_json()
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(r1, r2))


def test_noise_free_cohort_is_pure_sinusoid():
    spec = SyntheticCohortSpec(n_subjects_per_class=1, recording_length_s=8,
                               class_signal_rules=(ClassSignalRule(10.0, 1.0, 0.0), ClassSignalRule(6.0, 1.0, 0.0)))
    _, recs = generate_synthetic_cohort(spec)
    for rec, f in zip(recs, (10.0, 6.0)):
        spec_mag = np.abs(np.fft.rfft(rec.data.astype(float), axis=1))
        freqs = np.fft.rfftfreq(rec.meta.n_samples, 1 / 125.0)
        assert np.all(freqs[np.argmax(spec_mag, axis=1)] == f)


def test_cohort_class_separability():
    _, recs = generate_synthetic_cohort(SyntheticCohortSpec(recording_length_s=16))
    p6 = {lab: [] for lab in (0, 1)}
    for r in recs:
        p6[r.meta.label].append(bandpower(r.data.astype(float), 125.0, 5.5, 6.5).mean())
    wins = sum(a > b for a in p6[1] for b in p6[0])
    assert wins / (len(p6[0]) * len(p6[1])) >= 0.95


def test_empty_cohort_rejected():
    with pytest.raises(EegDataError, match="empty manifest"):
        generate_synthetic_cohort(SyntheticCohortSpec(n_subjects_per_class=0))


def test_cohort_round_trips_through_disk(tmp_path):
    manifest, recs = generate_synthetic_cohort(SyntheticCohortSpec(n_subjects_per_class=2, recording_length_s=6))
    path = write_cohort(manifest, recs, tmp_path)
    loaded, windows = load_cohort(path, 2.0, 0.2)
    assert loaded.to_json() == manifest.to_json()
    assert len(windows) == 4 * n_windows(750, 250, 200)
    # every window traces back to exactly one subject; subjects partition the window set
    by_subject = {}
    for w in windows:
        by_subject.setdefault(w.meta.subject_key, []).append(w)
    assert sum(len(v) for v in by_subject.values()) == len(windows)
    assert sorted(subjects_of(windows)) == sorted((m.dataset_id, m.subject_id, m.label)
                                                  for _, m in manifest.entries)


def test_manifest_duplicates_and_missing_fields():
    meta = RecordingMeta("s", "d", 0, 125.0, 1, 10)
    with pytest.raises(ParameterError):
        DatasetManifest([("a", meta), ("a", meta)])
    with pytest.raises(EegFormatError):
        DatasetManifest.from_json('[{"path": "a"}]')
