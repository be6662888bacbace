"""Recordings, epochs, labels, and the on-disk matrix format.

Every other module consumes the types defined here. Matrices are written as
little-endian float64, row-major, next to a JSON sidecar that records the
shape and a semantic name.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class InputError(ValueError):
    """Malformed or inconsistent user input (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A solver failed to produce a usable result (CLI exit code 3)."""


class InvariantError(AssertionError):
    """An internal invariant was violated (CLI exit code 4)."""


@dataclass(frozen=True)
class Recording:
    samples: np.ndarray  # C x T
    sample_rate_hz: float
    channel_names: tuple[str, ...]

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise InputError(f"samples must be a non-empty C x T matrix, got shape {samples.shape}")
        if not self.sample_rate_hz > 0:
            raise InputError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        names = tuple(str(n) for n in self.channel_names)
        if len(names) != samples.shape[0]:
            raise InputError(f"{len(names)} channel names for {samples.shape[0]} channels")
        if len(set(names)) != len(names):
            raise InputError("channel names must be unique")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class Epoch:
    window: np.ndarray  # C x L
    index_p: int
    start_time_s: float
    label: Optional[int] = None

    def __post_init__(self):
        window = np.asarray(self.window, dtype=float)
        if window.ndim != 2 or window.shape[1] < 2:
            raise InputError(f"epoch window must be C x L with L >= 2, got {window.shape}")
        if self.index_p < 0:
            raise InputError("index_p must be non-negative")
        if self.label is not None and self.label not in (0, 1, 2):
            raise InputError(f"epoch label {self.label} outside {{0,1,2}}")
        window.setflags(write=False)
        object.__setattr__(self, "window", window)


@dataclass(frozen=True)
class LabelSequence:
    labels: np.ndarray
    n_states: int = 2

    def __post_init__(self):
        if self.n_states not in (2, 3):
            raise InputError(f"n_states must be 2 or 3, got {self.n_states}")
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_states):
            raise InputError(f"labels must lie in [0, {self.n_states})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.size)


def epoch_length_samples(epoch_len_s: float, sample_rate_hz: float) -> int:
    return int(round(epoch_len_s * sample_rate_hz))


def segment_recording(rec: Recording, epoch_len_s: float, stride_s: float,
                      labels: Optional[Sequence[int]] = None) -> list[Epoch]:
    """Cut a recording into fixed-length epochs with a sliding window.

    Trailing samples that do not fill a whole window are dropped. Epoch ``i``
    starts at ``i * stride_s`` seconds.
    """
    if epoch_len_s <= 0 or stride_s <= 0:
        raise InputError("epoch_len_s and stride_s must be positive")
    L = epoch_length_samples(epoch_len_s, rec.sample_rate_hz)
    if L < 2:
        raise InputError(f"epoch of {epoch_len_s}s at {rec.sample_rate_hz}Hz has fewer than 2 samples")
    step = stride_s * rec.sample_rate_hz
    T = rec.n_samples
    if T < L:
        raise InputError(f"recording too short: {T} samples < one epoch of {L}")
    n = int(math.floor((T - L) / step + 1e-9)) + 1
    if labels is not None and len(labels) != n:
        raise InputError(f"{len(labels)} labels for {n} epochs")
    out = []
    for i in range(n):
        start = int(round(i * step))
        out.append(Epoch(rec.samples[:, start:start + L], i, i * stride_s,
                         None if labels is None else int(labels[i])))
    return out


def normalize_epoch(e: Epoch) -> Epoch:
    """Zero-mean, unit (population) variance per channel; flat channels become zeros."""
    x = e.window
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    sd = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    flat = sd[:, 0] <= 1e-12 * np.maximum(1.0, np.abs(mu[:, 0]))
    sd[flat] = 1.0
    z = centered / sd
    z[flat] = 0.0
    return Epoch(z, e.index_p, e.start_time_s, e.label)


def majority_epoch_labels(sample_labels: Sequence[int], n_epochs: int, L: int, step: float) -> np.ndarray:
    """Per-epoch label from per-sample annotations; ties go to seizure (1)."""
    sample_labels = np.asarray(sample_labels, dtype=np.int64)
    out = np.zeros(n_epochs, dtype=np.int64)
    for i in range(n_epochs):
        start = int(round(i * step))
        seg = sample_labels[start:start + L]
        n_sz = int((seg == 1).sum())
        out[i] = 1 if 2 * n_sz >= seg.size else 0
    return out


def assign_preictal_labels(labels: LabelSequence, onset_indices: Sequence[int],
                           horizon_epochs: int) -> LabelSequence:
    """Mark the ``horizon_epochs`` normal epochs before each onset as preictal (2)."""
    if labels.n_states != 2:
        raise InputError("preictal labelling needs a binary label sequence")
    if horizon_epochs < 1:
        raise InputError("horizon_epochs must be positive")
    y = labels.labels.copy()
    P = y.size
    for s in onset_indices:
        if not 0 <= s < P:
            raise InputError(f"onset index {s} out of range for {P} epochs")
        lo = max(0, s - horizon_epochs)
        seg = y[lo:s]
        seg[seg == 0] = 2
    return LabelSequence(y, 3)


def onset_indices(labels: Sequence[int]) -> list[int]:
    y = np.asarray(labels)
    return [int(i) for i in np.flatnonzero((y[1:] == 1) & (y[:-1] == 0)) + 1]


# ---------------------------------------------------------------- file I/O

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_matrix(path, array, name: str, **extra) -> Path:
    """Write ``array`` as little-endian float64 with a JSON shape sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    path.write_bytes(arr.tobytes(order="C"))
    meta = {"name": name, "shape": list(arr.shape), "dtype": "<f8", "order": "C"}
    meta.update(extra)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        raw = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read matrix {path}: {exc}") from exc
    shape = tuple(int(s) for s in meta["shape"])
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise InputError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def read_recording_csv(path, sample_rate_hz: Optional[float] = None) -> Recording:
    """Read a CSV with a channel-name header and one row per time point.

    A leading ``time`` column is dropped. The sample rate comes from the
    argument, or from the time column spacing when it is absent.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise InputError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    has_time = header[0].lower() == "time"
    names = header[1:] if has_time else header
    if not names:
        raise InputError(f"{path}: no channel columns")
    data = np.empty((len(rows) - 1, len(header)))
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        try:
            data[lineno - 2] = [float(v) for v in row]
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: non-finite values")
    if sample_rate_hz is None:
        if not has_time or data.shape[0] < 2:
            raise InputError(f"{path}: sample rate unknown (no time column and none given)")
        dt = np.diff(data[:, 0])
        if not np.all(dt > 0):
            raise InputError(f"{path}: time column is not increasing")
        sample_rate_hz = 1.0 / float(np.median(dt))
    signal = data[:, 1:] if has_time else data
    return Recording(signal.T.copy(), float(sample_rate_hz), tuple(names))


def read_recording_bin(path) -> Recording:
    """Read raw little-endian float32 samples (time x channels) plus JSON metadata."""
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        raw = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read recording {path}: {exc}") from exc
    try:
        names = list(meta["channels"])
        rate = float(meta["sample_rate_hz"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{_sidecar(path)}: bad metadata ({exc})") from exc
    C = len(names)
    if C == 0:
        raise InputError(f"{_sidecar(path)}: empty channel list")
    frame = 4 * C
    if len(raw) == 0 or len(raw) % frame:
        raise InputError(f"{path}: {len(raw)} bytes is not a whole number of {frame}-byte frames "
                         f"(trailing {len(raw) % frame} bytes at offset {len(raw) - len(raw) % frame})")
    x = np.frombuffer(raw, dtype="<f4").reshape(-1, C).astype(float)
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
        raise InputError(f"{path}: non-finite sample in frame {bad} (byte {bad * frame})")
    return Recording(x.T.copy(), rate, tuple(names))


def write_recording_bin(path, rec: Recording) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(rec.samples.T, dtype="<f4").tobytes())
    meta = {"channels": list(rec.channel_names), "sample_rate_hz": rec.sample_rate_hz}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_recording(path, sample_rate_hz: Optional[float] = None) -> Recording:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_recording_csv(path, sample_rate_hz)
    return read_recording_bin(path)


def read_labels_csv(path) -> np.ndarray:
    """Read ``epoch_index,label`` rows; indices must be 0..P-1 in any order."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"epoch_index", "label"} <= set(reader.fieldnames):
                raise InputError(f"{path}: header must contain epoch_index,label")
            pairs = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    pairs.append((int(row["epoch_index"]), int(row["label"])))
                except (TypeError, ValueError) as exc:
                    raise InputError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not pairs:
        raise InputError(f"{path}: no labels")
    idx = sorted(i for i, _ in pairs)
    if idx != list(range(len(pairs))):
        raise InputError(f"{path}: epoch indices must cover 0..{len(pairs) - 1} exactly once")
    out = np.empty(len(pairs), dtype=np.int64)
    for i, lab in pairs:
        out[i] = lab
    return out


def write_labels_csv(path, labels: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch_index", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, int(lab)])
    return path
