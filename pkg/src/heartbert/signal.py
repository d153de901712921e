"""ECG ingestion, Fourier resampling, min-max normalization and windowing."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, FormatError, MissingArtifactError, ParameterError, DomainError

RAW_MAGIC = b"HBSIG01\x00"
TARGET_RATE_HZ = 360.0
MAX_WINDOW = 4000


@dataclass
class EcgRecord:
    samples: np.ndarray
    sampling_rate_hz: float
    record_id: str = ""
    channel: str = "ECG"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        self.sampling_rate_hz = float(self.sampling_rate_hz)
        if self.samples.size == 0:
            raise EmptyInputError(f"record {self.record_id!r} has no samples")
        if not np.isfinite(self.sampling_rate_hz) or self.sampling_rate_hz <= 0:
            raise ParameterError(f"sampling rate must be positive, got {self.sampling_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError(f"record {self.record_id!r} contains NaN/Inf samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sampling_rate_hz


@dataclass
class NormalizedWindow:
    samples: np.ndarray
    record_id: str = ""
    offset: int = 0
    length: int = field(init=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        self.length = int(self.samples.size)
        if not 1 <= self.length <= MAX_WINDOW:
            raise DomainError(f"window length {self.length} outside [1, {MAX_WINDOW}]")
        if self.samples.min() < 0.0 or self.samples.max() > 1.0:
            raise DomainError("window samples must lie in [0, 1]")


# ---------------------------------------------------------------- file formats

def load_record(path, format: str | None = None, record_id: str | None = None) -> EcgRecord:
    """Read a single-channel record from ``csv`` or ``raw-f32`` format.

    The format is inferred from the extension (``.csv`` vs anything else) when
    not given.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing record file: {path}")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "raw-f32"
    rid = record_id if record_id is not None else path.stem
    if format == "csv":
        return _load_csv(path, rid)
    if format == "raw-f32":
        return _load_raw(path, rid)
    raise ParameterError(f"unknown record format {format!r}")


def _load_csv(path: Path, rid: str) -> EcgRecord:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("rate="):
        raise FormatError(f"{path}: first line must be 'rate=<float>'")
    try:
        rate = float(lines[0][len("rate="):])
    except ValueError:
        raise FormatError(f"{path}: unparseable rate {lines[0]!r}") from None
    body = [ln.strip() for ln in lines[1:] if ln.strip()]
    if not body:
        raise EmptyInputError(f"{path}: no samples")
    try:
        samples = np.array([float(v) for v in body])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return EcgRecord(samples, rate, rid)


def _load_raw(path: Path, rid: str) -> EcgRecord:
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {RAW_MAGIC!r}")
    (rate,) = struct.unpack("<d", blob[8:16])
    payload = blob[16:]
    if len(payload) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    if not payload:
        raise EmptyInputError(f"{path}: no samples")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return EcgRecord(samples, rate, rid)


def save_record(record: EcgRecord, path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "raw-f32"
    if format == "csv":
        lines = [f"rate={record.sampling_rate_hz!r}"] + [repr(float(v)) for v in record.samples]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif format == "raw-f32":
        path.write_bytes(
            RAW_MAGIC + struct.pack("<d", record.sampling_rate_hz) + record.samples.astype("<f4").tobytes()
        )
    else:
        raise ParameterError(f"unknown record format {format!r}")


# ------------------------------------------------------------------ processing

def resampled_length(n: int, source_hz: float, target_hz: float) -> int:
    # half-up rounding; Python's round() is banker's rounding
    return int(np.floor(n * target_hz / source_hz + 0.5))


def fourier_resample(x: np.ndarray, num: int) -> np.ndarray:
    """Resample a real 1-D signal to ``num`` samples by spectral zero-padding/truncation.

    The Nyquist bin of an even-length spectrum is split (upsampling) or folded
    (downsampling) so the output stays real and amplitude-consistent.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if num < 1:
        raise ParameterError("target length must be >= 1")
    if num == n:
        return x.copy()
    spec = np.fft.rfft(x)
    out = np.zeros(num // 2 + 1, dtype=np.complex128)
    m = min(n, num)
    keep = m // 2 + 1
    out[:keep] = spec[:keep]
    if m % 2 == 0:
        if num < n:
            out[m // 2] *= 2.0
        else:
            out[m // 2] *= 0.5
    return np.fft.irfft(out, num) * (num / n)


def resample(record: EcgRecord, target_hz: float = TARGET_RATE_HZ) -> EcgRecord:
    if not target_hz > 0:
        raise ParameterError(f"target rate must be positive, got {target_hz}")
    num = resampled_length(record.samples.size, record.sampling_rate_hz, target_hz)
    if num < 1:
        raise ParameterError(f"record too short to resample to {target_hz} Hz")
    y = fourier_resample(record.samples, num)
    return EcgRecord(y, target_hz, record.record_id, record.channel)


def normalize(record: EcgRecord) -> EcgRecord:
    """Per-record min-max scaling to [0, 1]; constant records map to 0.5."""
    x = record.samples
    lo, hi = x.min(), x.max()
    if hi > lo:
        y = (x - lo) / (hi - lo)
        # guard against rounding a hair outside the unit interval
        y = np.clip(y, 0.0, 1.0)
    else:
        y = np.full_like(x, 0.5)
    return EcgRecord(y, record.sampling_rate_hz, record.record_id, record.channel)


def window(record: EcgRecord, max_len: int = MAX_WINDOW) -> list[NormalizedWindow]:
    if max_len < 1:
        raise ParameterError("max_len must be >= 1")
    if max_len > MAX_WINDOW:
        raise ParameterError(f"max_len cannot exceed {MAX_WINDOW}")
    x = record.samples
    if x.size == 0:
        raise EmptyInputError("cannot window an empty record")
    return [
        NormalizedWindow(x[i:i + max_len], record.record_id, i)
        for i in range(0, x.size, max_len)
    ]


def preprocess(record: EcgRecord, target_hz: float = TARGET_RATE_HZ,
               max_len: int = MAX_WINDOW) -> list[NormalizedWindow]:
    """Resample, normalize and window one record, in pipeline order."""
    return window(normalize(resample(record, target_hz)), max_len)
