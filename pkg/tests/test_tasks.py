import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heartbert.errors import DataValidationError, FormatError, MissingArtifactError, ParameterError
from heartbert.signal import EcgRecord
from heartbert.tasks import (EPOCH_SAMPLES, SEGMENT_SAMPLES, BeatAnnotation, LabeledSegment, SleepEpoch,
                             SynthProfile, balance_and_split, beat_spans, prepare_heartbeat, prepare_sleep,
                             read_beat_annotation, read_dataset, read_stages, rescale_peaks, split_epochs,
                             split_sizes, stage_label, synth_corpus, write_beat_annotation, write_dataset,
                             write_stages)


def epoch(stage, n=EPOCH_SAMPLES, i=0):
    return SleepEpoch(np.linspace(0, 1, n), stage, "rec", i)


# ---------------------------------------------------------------- sleep

def test_epoch_gives_ten_segments():
    segs = prepare_sleep([epoch("Wake")], "three")
    assert EPOCH_SAMPLES == 10 * SEGMENT_SAMPLES == 10_800
    assert len(segs) == 10 and all(s.samples.size == 1080 and s.label == 0 for s in segs)
    np.testing.assert_array_equal(np.concatenate([s.samples for s in segs]), epoch("Wake").samples)


@pytest.mark.parametrize("stage,mode,name", [("S4", "five", "S3"), ("S2", "three", "NREM"), ("S1", "three", "NREM"),
                                             ("S4", "three", "NREM"), ("REM", "five", "REM"), ("Wake", "three", "Wake")])
def test_stage_mapping(stage, mode, name):
    classes = {"three": ("Wake", "REM", "NREM"), "five": ("Wake", "REM", "S1", "S2", "S3")}[mode]
    assert stage_label(stage, mode) == classes.index(name)
    assert {s.label for s in prepare_sleep([epoch(stage)], mode)} == {classes.index(name)}


def test_wrong_length_epochs_rejected_with_count(caplog):
    with caplog.at_level(logging.WARNING):
        segs = prepare_sleep([epoch("REM"), epoch("REM", n=10_000), epoch("S1", n=12_000)], "five")
    assert len(segs) == 10
    assert "rejected 2 epoch" in caplog.text


def test_sleep_errors():
    with pytest.raises(DataValidationError):
        SleepEpoch(np.zeros(3), "S5")
    with pytest.raises(ParameterError):
        prepare_sleep([epoch("Wake")], "four")


def test_split_epochs():
    rec = EcgRecord(np.arange(3 * EPOCH_SAMPLES, dtype=float), 360.0, "r")
    eps = split_epochs(rec, ["Wake", "S2", "REM"])
    assert [e.stage for e in eps] == ["Wake", "S2", "REM"]
    assert eps[1].samples[0] == EPOCH_SAMPLES and eps[2].samples.size == EPOCH_SAMPLES


# ---------------------------------------------------------------- heartbeats

def test_beat_spans_examples():
    assert beat_spans([100, 300, 500]).tolist() == [[200, 400]]
    assert beat_spans([100, 300, 500, 900]).tolist() == [[200, 400], [400, 700]]


def test_beat_spans_errors():
    with pytest.raises(DataValidationError):
        beat_spans([100, 300])
    with pytest.raises(DataValidationError):
        beat_spans([100, 500, 300])


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(2, 2000), min_size=2, max_size=60), st.integers(0, 10_000))
def test_beat_spans_partition(gaps, start):
    r = start + np.concatenate([[0], np.cumsum(gaps)])
    spans = beat_spans(r)
    assert spans.shape == (r.size - 2, 2)
    assert spans[0, 0] == (r[0] + r[1]) // 2 and spans[-1, 1] == (r[-2] + r[-1]) // 2
    assert np.all(spans[1:, 0] == spans[:-1, 1])
    assert np.all(spans[:, 0] < spans[:, 1])
    assert np.all((spans[:, 0] <= r[1:-1]) & (r[1:-1] < spans[:, 1]))


def test_prepare_heartbeat_labels():
    rec = EcgRecord(np.arange(1000, dtype=float), 360.0, "r")
    segs = prepare_heartbeat(rec, BeatAnnotation([100, 300, 500, 900], ["N", "V", "Q", "S"]))
    assert [s.label for s in segs] == [2, 3]
    assert segs[0].samples.tolist() == list(range(200, 400))
    with pytest.raises(DataValidationError):
        prepare_heartbeat(EcgRecord(np.zeros(600), 360.0), BeatAnnotation([100, 300, 500, 900], list("NNNN")))


def test_beat_annotation_validation():
    with pytest.raises(DataValidationError):
        BeatAnnotation([1, 2], ["N"])
    with pytest.raises(DataValidationError):
        BeatAnnotation([1, 2], ["N", "F"])


def test_rescale_peaks():
    assert rescale_peaks(np.array([0, 250, 1000]), 250).tolist() == [0, 360, 1440]


# ---------------------------------------------------------------- balancing

def fake_segments(counts, task):
    return [LabeledSegment(c, task, source=f"{c}:{i}") for c, n in enumerate(counts) for i in range(n)]


@pytest.mark.parametrize("counts,task,total", [
    ((31_030, 7_000, 63_600), "sleep3", 21_000),
    ((31_030, 7_000, 18_140, 38_830, 6_630), "sleep5", 33_150),
])
def test_balanced_totals_from_reference_counts(counts, task, total):
    out = balance_and_split(fake_segments(counts, task), seed=0)
    assert sum(len(v) for v in out.values()) == total
    per = total // len(counts)
    for name, frac in (("train", 0.7), ("val", 0.1), ("test", 0.2)):
        hist = np.bincount([s.label for s in out[name]], minlength=len(counts))
        assert np.all(hist == hist[0]) and abs(hist[0] - frac * per) <= 1


def test_heartbeat_target():
    out = balance_and_split(fake_segments((9000, 5200, 6000, 5000), "heartbeat4"), per_class=5000, seed=1)
    assert sum(len(v) for v in out.values()) == 20_000


def test_split_sizes():
    assert split_sizes(1000) == (700, 100, 200)
    assert sum(split_sizes(7)) == 7


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5000))
def test_split_sizes_within_one(n):
    a, b, c = split_sizes(n)
    assert a + b + c == n and min(a, b, c) >= 0
    assert abs(a - 0.7 * n) <= 1 and abs(b - 0.1 * n) <= 1 and abs(c - 0.2 * n) <= 1


def test_balance_disjoint_and_deterministic():
    segs = fake_segments((50, 30, 80), "sleep3")
    a, b = balance_and_split(segs, seed=5), balance_and_split(segs, seed=5)
    c = balance_and_split(segs, seed=6)
    src = {k: [s.source for s in v] for k, v in a.items()}
    assert src == {k: [s.source for s in v] for k, v in b.items()}
    assert src != {k: [s.source for s in v] for k, v in c.items()}
    flat = src["train"] + src["val"] + src["test"]
    assert len(flat) == len(set(flat)) == 90


def test_balance_errors():
    with pytest.raises(ParameterError):
        balance_and_split(fake_segments((10, 5, 8), "sleep3"), per_class=6)
    with pytest.raises(DataValidationError):
        balance_and_split(fake_segments((10, 0, 8), "sleep3"))
    with pytest.raises(ParameterError):
        balance_and_split(fake_segments((10, 5, 8), "sleep3"), ratios=(0.5, 0.5, 0.5))


# ---------------------------------------------------------------- synthetic data

def test_synth_peak_count():
    recs = synth_corpus(SynthProfile(n_records=1, rate=250, duration_s=10, base_freq=1.0))
    assert recs[0].annotation.r_peaks.size == 10
    assert len(recs[0].record) == 2500


def test_synth_peaks_are_maxima():
    rec = synth_corpus(SynthProfile(n_records=1, duration_s=10, noise=0.0, class_probs=(1, 0, 0, 0)))[0]
    x, peaks = rec.record.samples, rec.annotation.r_peaks
    for p in peaks:
        lo, hi = max(p - 20, 0), min(p + 21, x.size)
        assert np.argmax(x[lo:hi]) + lo == p


def test_synth_deterministic():
    a = synth_corpus(SynthProfile(n_records=2, duration_s=20, seed=3))
    b = synth_corpus(SynthProfile(n_records=2, duration_s=20, seed=3))
    c = synth_corpus(SynthProfile(n_records=2, duration_s=20, seed=4))
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.record.samples, rb.record.samples)
        assert ra.annotation.labels == rb.annotation.labels and ra.stages == rb.stages
    assert not np.array_equal(a[0].record.samples, c[0].record.samples)


def test_synth_classes_nearest_centroid_separable():
    prof = SynthProfile(n_records=4, duration_s=120, class_amplitude=(1.0, 2.0, 1.0, 1.0),
                        class_width=(1.0, 1.0, 1.0, 1.0), class_probs=(0.5, 0.5, 0.0, 0.0), seed=11)
    feats, labels = [], []
    for r in synth_corpus(prof):
        for seg in prepare_heartbeat(r.record, r.annotation):
            feats.append([seg.samples.max(), seg.samples.min(), seg.samples.std()])
            labels.append(seg.label)
    feats, labels = np.array(feats), np.array(labels)
    half = len(labels) // 2
    cents = np.stack([feats[:half][labels[:half] == c].mean(0) for c in (0, 1)])
    pred = np.argmin(((feats[half:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == labels[half:]) >= 0.95


def test_synth_stage_rate_changes_peak_density():
    prof = SynthProfile(n_records=1, duration_s=60, stage_rate={s: 1.5 for s in ("Wake", "REM", "S1", "S2", "S3", "S4")})
    assert synth_corpus(prof)[0].annotation.r_peaks.size == 90


# ---------------------------------------------------------------- files

def test_dataset_roundtrip(tmp_path):
    segs = [LabeledSegment(1, "sleep3", token_ids=np.array([0, 7, 9, 2])),
            LabeledSegment(0, "sleep3", token_ids=np.array([0, 2]))]
    p = tmp_path / "train.tsv"
    write_dataset(p, segs, "sleep3", "abc", "def", 7)
    assert p.read_text().splitlines() == ["# HBD v1 task=sleep3 codebook=abc tokenizer=def seed=7",
                                          "1\t0 7 9 2", "0\t0 2"]
    header, ids, labels = read_dataset(p)
    assert header == {"task": "sleep3", "codebook": "abc", "tokenizer": "def", "seed": "7"}
    assert [i.tolist() for i in ids] == [[0, 7, 9, 2], [0, 2]] and labels.tolist() == [1, 0]


def test_dataset_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_dataset(tmp_path / "none.tsv")
    (tmp_path / "x.tsv").write_text("1\t0 2\n")
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "x.tsv")


def test_annotation_and_stage_files(tmp_path):
    ann = BeatAnnotation([5, 10, 20], ["N", "S", "Q"])
    write_beat_annotation(tmp_path / "a.ann", ann)
    back = read_beat_annotation(tmp_path / "a.ann")
    assert back.r_peaks.tolist() == [5, 10, 20] and back.labels == ["N", "S", "Q"]
    write_stages(tmp_path / "a.stages", ["Wake", "S4"])
    assert read_stages(tmp_path / "a.stages") == ["Wake", "S4"]
