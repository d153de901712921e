"""Lloyd-Max scalar quantizer and the sample-to-symbol mapping."""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DegenerateDataError, DomainError, FormatError, MissingArtifactError,
                     ParameterError, SymbolError)
from .signal import NormalizedWindow

# 94 printable ASCII characters (no space) plus six Latin-1 letters to reach 100.
DEFAULT_ALPHABET = (
    string.ascii_uppercase + string.ascii_lowercase + string.digits + string.punctuation + "ÀÁÂÃÄÅ"
)
assert len(DEFAULT_ALPHABET) == 100 and len(set(DEFAULT_ALPHABET)) == 100

DEFAULT_LEVELS = 100
DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 200
MAX_TRAINING_SAMPLES = 10_000_000


@dataclass
class QuantizerCodebook:
    centroids: np.ndarray
    alphabet: str = DEFAULT_ALPHABET
    training_distortion: float = float("nan")
    boundaries: np.ndarray = field(default=None)
    history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).ravel()
        if self.boundaries is None:
            self.boundaries = midpoints(self.centroids)
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64).ravel()
        self.validate()

    @property
    def levels(self) -> int:
        return self.centroids.size

    def validate(self) -> None:
        c, b = self.centroids, self.boundaries
        if c.size < 1:
            raise DegenerateDataError("codebook has no centroids")
        if np.any(np.diff(c) <= 0):
            raise DegenerateDataError("centroids must be strictly increasing")
        if b.size != c.size - 1:
            raise FormatError(f"expected {c.size - 1} boundaries, got {b.size}")
        if b.size and np.max(np.abs(b - midpoints(c))) > 1e-9:
            raise FormatError("boundaries are not midpoints of adjacent centroids")
        if len(self.alphabet) != c.size:
            raise FormatError(f"alphabet has {len(self.alphabet)} characters, expected {c.size}")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise FormatError("alphabet characters must be unique")
        if any(not ch.isprintable() or ch.isspace() for ch in self.alphabet):
            raise FormatError("alphabet must contain printable, non-whitespace characters")

    def to_text(self) -> str:
        lines = ["HBQ v1", f"levels={self.levels}", self.alphabet,
                 f"distortion {self.training_distortion!r}"]
        lines += [f"centroid {i} {v!r}" for i, v in enumerate(self.centroids.tolist())]
        lines += [f"boundary {i} {v!r}" for i, v in enumerate(self.boundaries.tolist())]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "QuantizerCodebook":
        lines = text.split("\n")
        if len(lines) < 3 or lines[0] != "HBQ v1":
            raise FormatError("codebook: missing 'HBQ v1' header")
        if not lines[1].startswith("levels="):
            raise FormatError("codebook: missing levels line")
        levels = int(lines[1][len("levels="):])
        alphabet = lines[2]
        cents, bounds = {}, {}
        distortion = float("nan")
        for ln in lines[3:]:
            if not ln:
                continue
            parts = ln.split(" ")
            if parts[0] == "distortion" and len(parts) == 2:
                distortion = float(parts[1])
            elif parts[0] in ("centroid", "boundary") and len(parts) == 3:
                (cents if parts[0] == "centroid" else bounds)[int(parts[1])] = float(parts[2])
            else:
                raise FormatError(f"codebook: unrecognised line {ln!r}")
        if sorted(cents) != list(range(levels)) or sorted(bounds) != list(range(levels - 1)):
            raise FormatError("codebook: centroid/boundary indices incomplete")
        return cls(np.array([cents[i] for i in range(levels)]), alphabet, distortion,
                   np.array([bounds[i] for i in range(levels - 1)]))

    @classmethod
    def load(cls, path) -> "QuantizerCodebook":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"missing codebook: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


@dataclass
class SymbolSequence:
    text: str
    record_id: str = ""
    offset: int = 0

    def __len__(self):
        return len(self.text)


def midpoints(c: np.ndarray) -> np.ndarray:
    return (c[:-1] + c[1:]) / 2.0


def assign_cells(x: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Cell index per sample; a sample exactly on a boundary goes to the lower cell."""
    return np.searchsorted(boundaries, x, side="left")


def train_codebook(samples, levels: int = DEFAULT_LEVELS, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER, seed: int = 0,
                   alphabet: str | None = None,
                   max_samples: int = MAX_TRAINING_SAMPLES) -> QuantizerCodebook:
    """Fit a minimum-MSE scalar quantizer with Lloyd's alternating iteration.

    Each iteration partitions the data with midpoint boundaries, records the
    distortion of that partition, then moves every centroid to its cell mean.
    Empty cells are re-seeded by splitting the cell with the largest total
    squared error, which keeps the number of levels fixed and never raises
    distortion. Iteration stops once the relative drop in distortion falls
    below ``tol`` or after ``max_iter`` iterations.
    """
    if levels < 1:
        raise ParameterError("levels must be >= 1")
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size > max_samples:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(x.size, size=max_samples, replace=False)]
    if x.size < levels:
        raise DegenerateDataError(f"need at least {levels} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DomainError("training samples must be finite")
    x = np.sort(x)
    if np.count_nonzero(np.diff(x)) + 1 < levels:
        raise DegenerateDataError(f"fewer than {levels} distinct sample values")
    if alphabet is None:
        if levels > len(DEFAULT_ALPHABET):
            raise ParameterError(f"default alphabet supports at most {len(DEFAULT_ALPHABET)} levels")
        alphabet = DEFAULT_ALPHABET[:levels]

    c = np.quantile(x, (np.arange(levels) + 0.5) / levels)
    history = []
    prev = None
    for _ in range(max_iter):
        idx = assign_cells(x, midpoints(c))
        d = float(np.mean((x - c[idx]) ** 2))
        history.append(d)
        c = _update_centroids(x, idx, c, levels)
        if prev is not None and (d == 0.0 or (prev - d) <= tol * prev):
            break
        prev = d

    idx = assign_cells(x, midpoints(c))
    final = float(np.mean((x - c[idx]) ** 2))
    history.append(final)
    return QuantizerCodebook(c, alphabet, final, history=history)


def _update_centroids(x, idx, c, levels):
    counts = np.bincount(idx, minlength=levels)
    sums = np.bincount(idx, weights=x, minlength=levels)
    new = c.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled]
    # x is sorted, so each cell is a contiguous run; a constant run keeps its exact value
    ends = np.cumsum(counts)
    starts = ends - counts
    first, last = np.minimum(starts, x.size - 1), np.maximum(ends - 1, 0)
    const = filled & (x[first] == x[last])
    new[const] = x[first[const]]
    empty = np.flatnonzero(~filled)
    if empty.size == 0:
        return new
    # keep only occupied centroids, then split the worst cells once per empty slot
    kept = list(new[filled])
    for _ in range(empty.size):
        kept = np.array(sorted(kept))
        cell = assign_cells(x, midpoints(kept))
        sse = np.bincount(cell, weights=(x - kept[cell]) ** 2, minlength=kept.size)
        j = int(np.argmax(sse))
        if sse[j] <= 0.0:
            raise DegenerateDataError("cannot split a cell with zero spread")
        members = x[cell == j]
        mean = members.mean()
        lo, hi = members[members < mean], members[members >= mean]
        kept = [v for i, v in enumerate(kept) if i != j] + [lo.mean(), hi.mean()]
    return np.array(sorted(kept))


def quantize(values, codebook: QuantizerCodebook) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.all(np.isfinite(v))):
        raise DomainError("samples must lie in [0, 1]")
    return assign_cells(v, codebook.boundaries)


def encode_symbols(win: NormalizedWindow | np.ndarray, codebook: QuantizerCodebook) -> SymbolSequence:
    if isinstance(win, NormalizedWindow):
        values, rid, off = win.samples, win.record_id, win.offset
    else:
        values, rid, off = np.asarray(win, dtype=np.float64), "", 0
    idx = quantize(values, codebook)
    table = codebook.alphabet
    return SymbolSequence("".join(table[i] for i in idx.tolist()), rid, off)


def decode_symbols(seq: SymbolSequence | str, codebook: QuantizerCodebook) -> np.ndarray:
    text = seq.text if isinstance(seq, SymbolSequence) else seq
    lookup = {ch: i for i, ch in enumerate(codebook.alphabet)}
    try:
        idx = [lookup[ch] for ch in text]
    except KeyError as exc:
        raise SymbolError(f"character {exc.args[0]!r} is not in the codebook alphabet") from None
    return codebook.centroids[np.array(idx, dtype=np.int64)]
