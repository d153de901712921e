"""Downstream datasets: sleep-stage segments, R-peak heartbeats, balancing, synthetic ECG."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataValidationError, FormatError, MissingArtifactError, ParameterError
from .signal import TARGET_RATE_HZ, EcgRecord

log = logging.getLogger(__name__)

EPOCH_SECONDS = 30
SEGMENT_SECONDS = 3
EPOCH_SAMPLES = int(EPOCH_SECONDS * TARGET_RATE_HZ)      # 10,800
SEGMENT_SAMPLES = int(SEGMENT_SECONDS * TARGET_RATE_HZ)  # 1,080

SLEEP_STAGES = ("Wake", "REM", "S1", "S2", "S3", "S4")
TASK_CLASSES = {
    "sleep3": ("Wake", "REM", "NREM"),
    "sleep5": ("Wake", "REM", "S1", "S2", "S3"),
    "heartbeat4": ("N", "S", "V", "Q"),
}
BEAT_LABELS = TASK_CLASSES["heartbeat4"]


def n_classes(task: str) -> int:
    try:
        return len(TASK_CLASSES[task])
    except KeyError:
        raise ParameterError(f"unknown task {task!r}") from None


@dataclass
class SleepEpoch:
    samples: np.ndarray
    stage: str
    record_id: str = ""
    index: int = 0

    def __post_init__(self):
        if self.stage not in SLEEP_STAGES:
            raise DataValidationError(f"unknown sleep stage {self.stage!r}")


@dataclass
class LabeledSegment:
    label: int
    task: str
    samples: np.ndarray | None = None
    token_ids: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        if not 0 <= self.label < n_classes(self.task):
            raise DataValidationError(f"label {self.label} out of range for {self.task}")


@dataclass
class BeatAnnotation:
    r_peaks: np.ndarray
    labels: list

    def __post_init__(self):
        self.r_peaks = np.asarray(self.r_peaks, dtype=np.int64).ravel()
        self.labels = list(self.labels)
        if len(self.labels) != self.r_peaks.size:
            raise DataValidationError("beat labels must align 1:1 with R-peaks")
        if np.any(np.diff(self.r_peaks) <= 0):
            raise DataValidationError("R-peak indices must be strictly increasing")
        bad = set(self.labels) - set(BEAT_LABELS)
        if bad:
            raise DataValidationError(f"unknown beat labels {sorted(bad)}")


# ---------------------------------------------------------------- sleep

def stage_label(stage: str, mode: str) -> int:
    """Map a raw stage to a class index. S4 folds into S3; ``three`` folds S1-S3 into NREM."""
    if stage == "S4":
        stage = "S3"
    if mode == "three":
        return TASK_CLASSES["sleep3"].index("NREM" if stage in ("S1", "S2", "S3") else stage)
    if mode == "five":
        return TASK_CLASSES["sleep5"].index(stage)
    raise ParameterError(f"sleep mode must be 'three' or 'five', got {mode!r}")


def prepare_sleep(epochs: list[SleepEpoch], mode: str = "three") -> list[LabeledSegment]:
    task = {"three": "sleep3", "five": "sleep5"}.get(mode)
    if task is None:
        raise ParameterError(f"sleep mode must be 'three' or 'five', got {mode!r}")
    out, rejected = [], 0
    per_epoch = EPOCH_SAMPLES // SEGMENT_SAMPLES
    for ep in epochs:
        x = np.asarray(ep.samples, dtype=np.float64)
        if x.size != EPOCH_SAMPLES:
            rejected += 1
            continue
        label = stage_label(ep.stage, mode)
        for k in range(per_epoch):
            seg = x[k * SEGMENT_SAMPLES:(k + 1) * SEGMENT_SAMPLES]
            out.append(LabeledSegment(label, task, samples=seg, source=f"{ep.record_id}:{ep.index}:{k}"))
    if rejected:
        log.warning("prepare_sleep rejected %d epoch(s) of wrong length (expected %d samples)",
                    rejected, EPOCH_SAMPLES)
    return out


def split_epochs(record: EcgRecord, stages: list[str]) -> list[SleepEpoch]:
    """Cut a 360 Hz record into consecutive 30 s epochs, one stage per epoch."""
    return [SleepEpoch(record.samples[i * EPOCH_SAMPLES:(i + 1) * EPOCH_SAMPLES], s, record.record_id, i)
            for i, s in enumerate(stages)]


# ---------------------------------------------------------------- heartbeats

def beat_spans(r_peaks) -> np.ndarray:
    """[start, end) of every interior beat, bounded by midpoints to the neighbouring peaks."""
    r = np.asarray(r_peaks, dtype=np.int64)
    if r.size < 3:
        raise DataValidationError(f"need at least 3 R-peaks, got {r.size}")
    if np.any(np.diff(r) <= 0):
        raise DataValidationError("R-peak indices must be strictly increasing")
    mids = (r[:-1] + r[1:]) // 2
    return np.stack([mids[:-1], mids[1:]], axis=1)


def prepare_heartbeat(record: EcgRecord, ann: BeatAnnotation) -> list[LabeledSegment]:
    spans = beat_spans(ann.r_peaks)
    if spans[-1, 1] > record.samples.size:
        raise DataValidationError("R-peaks extend beyond the record")
    out = []
    for i, (a, b) in enumerate(spans.tolist(), start=1):
        out.append(LabeledSegment(BEAT_LABELS.index(ann.labels[i]), "heartbeat4",
                                  samples=record.samples[a:b], source=f"{record.record_id}:{a}"))
    return out


# ---------------------------------------------------------------- balancing

def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(np.floor(n * ratios[0] + 0.5))
    n_val = int(np.floor(n * ratios[1] + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def balance_and_split(segments: list[LabeledSegment], per_class: int | None = None,
                      ratios=(0.7, 0.1, 0.2), seed: int = 0) -> dict[str, list[LabeledSegment]]:
    """Undersample every class to ``per_class`` then split each class by ``ratios``."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ParameterError("ratios must be three non-negative fractions summing to 1")
    if not segments:
        raise DataValidationError("no segments to balance")
    task = segments[0].task
    k = n_classes(task)
    by_class = [[] for _ in range(k)]
    for s in segments:
        by_class[s.label].append(s)
    counts = [len(c) for c in by_class]
    if min(counts) == 0:
        raise DataValidationError(f"class(es) {[i for i, c in enumerate(counts) if c == 0]} absent")
    if per_class is None:
        per_class = min(counts)
    if per_class > min(counts):
        raise ParameterError(f"per_class={per_class} exceeds the smallest class count {min(counts)}")
    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    n_tr, n_va, _ = split_sizes(per_class, ratios)
    for members in by_class:
        pick = rng.choice(len(members), size=per_class, replace=False)
        chosen = [members[i] for i in pick]
        out["train"] += chosen[:n_tr]
        out["val"] += chosen[n_tr:n_tr + n_va]
        out["test"] += chosen[n_tr + n_va:]
    for name in out:
        order = rng.permutation(len(out[name]))
        out[name] = [out[name][i] for i in order]
    return out


# ---------------------------------------------------------------- synthetic ECG

# (offset from R in seconds, amplitude mV, gaussian width s) for P, Q, R, S, T
PQRST = ((-0.20, 0.15, 0.025), (-0.05, -0.10, 0.010), (0.0, 1.00, 0.012),
         (0.05, -0.25, 0.012), (0.30, 0.30, 0.050))


@dataclass
class SynthProfile:
    n_records: int = 4
    rate: float = 250.0
    duration_s: float = 60.0
    base_freq: float = 1.0
    noise: float = 0.02
    seed: int = 0
    # per-class (amplitude scale, width scale) for beat-level variants
    class_amplitude: tuple = (1.0, 0.6, 1.6, 0.3)
    class_width: tuple = (1.0, 0.8, 2.2, 1.4)
    class_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    # heart-rate multiplier per sleep stage; None keeps a constant rate
    stage_rate: dict | None = None


@dataclass
class SynthRecord:
    record: EcgRecord
    annotation: BeatAnnotation
    stages: list


def _template_train(t: np.ndarray, peaks_s: np.ndarray, amps, widths) -> np.ndarray:
    x = np.zeros_like(t)
    for r, a, w in zip(peaks_s, amps, widths):
        for off, amp, width in PQRST:
            x += a * amp * np.exp(-0.5 * ((t - r - off * w) / (width * w)) ** 2)
    return x


def synth_corpus(profile: SynthProfile) -> list[SynthRecord]:
    """Deterministic pseudo-ECG with known R-peaks, beat classes and sleep stages.

    Beats are Gaussian-bump PQRST complexes. Each beat's class scales its
    amplitude and width; each 30 s epoch carries a stage that scales the
    beat rate. Peaks sit half an RR interval into each beat slot, so a record
    of ``d`` seconds at ``f`` Hz has ``floor(d * f)`` peaks (exactly ``d * f``
    for whole beats) unless ``stage_rate`` varies the rate.
    """
    if profile.n_records < 1 or profile.rate <= 0 or profile.duration_s <= 0 or profile.base_freq <= 0:
        raise ParameterError("invalid synthetic profile")
    out = []
    for r in range(profile.n_records):
        rng = np.random.default_rng([profile.seed, r])
        n = int(round(profile.duration_s * profile.rate))
        t = np.arange(n) / profile.rate
        n_epochs = max(1, int(np.ceil(profile.duration_s / EPOCH_SECONDS)))
        stages = [SLEEP_STAGES[i] for i in rng.integers(0, len(SLEEP_STAGES), size=n_epochs)]
        rates = profile.stage_rate or {}
        peaks, tt = [], 0.0
        while True:
            stage = stages[min(int(tt // EPOCH_SECONDS), n_epochs - 1)]
            rr = 1.0 / (profile.base_freq * rates.get(stage, 1.0))
            centre = tt + rr / 2
            if centre >= profile.duration_s:
                break
            peaks.append(centre)
            tt += rr
        peaks = np.array(peaks)
        cls = rng.choice(len(BEAT_LABELS), size=peaks.size, p=np.asarray(profile.class_probs, dtype=float))
        amps = np.asarray(profile.class_amplitude)[cls] * rng.uniform(0.95, 1.05, size=peaks.size)
        widths = np.asarray(profile.class_width)[cls]
        x = _template_train(t, peaks, amps, widths) + profile.noise * rng.standard_normal(n)
        idx = np.minimum(np.round(peaks * profile.rate).astype(np.int64), n - 1)
        rec = EcgRecord(x, profile.rate, f"synth{r:03d}")
        out.append(SynthRecord(rec, BeatAnnotation(idx, [BEAT_LABELS[c] for c in cls]), stages))
    return out


def profile_dict(profile: SynthProfile) -> dict:
    d = asdict(profile)
    d["class_amplitude"] = list(profile.class_amplitude)
    d["class_width"] = list(profile.class_width)
    d["class_probs"] = list(profile.class_probs)
    return d


# ---------------------------------------------------------------- dataset files

def write_dataset(path, segments: list[LabeledSegment], task: str, codebook_hash: str,
                  tokenizer_hash: str, seed: int) -> None:
    lines = [f"# HBD v1 task={task} codebook={codebook_hash} tokenizer={tokenizer_hash} seed={seed}"]
    for s in segments:
        if s.token_ids is None:
            raise DataValidationError("segment has no token ids")
        lines.append(f"{s.label}\t{' '.join(map(str, np.asarray(s.token_ids).tolist()))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> tuple[dict, list[np.ndarray], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing dataset: {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines[0].startswith("# HBD v1 "):
        raise FormatError(f"{path}: missing dataset header")
    header = dict(kv.split("=", 1) for kv in lines[0][len("# HBD v1 "):].split())
    ids, labels = [], []
    for ln in lines[1:]:
        if not ln:
            continue
        lab, _, body = ln.partition("\t")
        labels.append(int(lab))
        ids.append(np.array([int(v) for v in body.split()], dtype=np.int64))
    return header, ids, np.array(labels, dtype=np.int64)


def write_beat_annotation(path, ann: BeatAnnotation) -> None:
    lines = ["HBA v1"] + [f"{p}\t{l}" for p, l in zip(ann.r_peaks.tolist(), ann.labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_beat_annotation(path) -> BeatAnnotation:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing annotation: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").split("\n") if ln]
    if not lines or lines[0] != "HBA v1":
        raise FormatError(f"{path}: missing 'HBA v1' header")
    peaks, labels = [], []
    for ln in lines[1:]:
        p, _, lab = ln.partition("\t")
        peaks.append(int(p))
        labels.append(lab)
    return BeatAnnotation(np.array(peaks, dtype=np.int64), labels)


def write_stages(path, stages: list[str]) -> None:
    Path(path).write_text("\n".join(["HBS v1"] + list(stages)) + "\n", encoding="utf-8")


def read_stages(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing stage file: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").split("\n") if ln]
    if not lines or lines[0] != "HBS v1":
        raise FormatError(f"{path}: missing 'HBS v1' header")
    return lines[1:]


def rescale_peaks(peaks: np.ndarray, source_hz: float, target_hz: float = TARGET_RATE_HZ) -> np.ndarray:
    return np.floor(np.asarray(peaks) * (target_hz / source_hz) + 0.5).astype(np.int64)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()
