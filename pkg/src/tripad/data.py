"""Loading, normalization, windowing and synthesis of labeled multivariate series."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, IoError, ParseError, SchemaError, SizeError, SpecError

EPS_STD = 1e-8


@dataclass(frozen=True)
class LabeledSeries:
    """An ``(L, M)`` series with optional per-timestep 0/1 labels."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "series"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise SchemaError(f"values must be a non-empty (L, M) matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError(f"{self.name}: values contain NaN or Inf")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (values.shape[0],):
                raise SchemaError(
                    f"{self.name}: labels length {labels.shape} does not match L={values.shape[0]}"
                )
            if not np.all((labels == 0) | (labels == 1)):
                raise SchemaError(f"{self.name}: labels must be 0 or 1")
            object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(-1), EPS_STD)
        if mean.shape != std.shape:
            raise SchemaError("mean and std must have the same length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # (B, W, M)
    starts: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.windows.shape[0]


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_rows(path: Path) -> list[list[str]]:
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv_dataset(values_path, labels_path=None, name: Optional[str] = None) -> LabeledSeries:
    """Read a numeric CSV (optional header row) and an optional 0/1 labels CSV."""
    values_path = Path(values_path)
    rows = _read_rows(values_path)
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{values_path}: no data rows")
    width = len(rows[0])
    data = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{values_path}:{i + 1}: expected {width} columns, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"{values_path}:{i + 1}: non-numeric cell {cell!r}") from None
    if not np.all(np.isfinite(data)):
        raise DataError(f"{values_path}: NaN or Inf cell")

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        label_rows = _read_rows(labels_path)
        if len(label_rows) != data.shape[0]:
            raise SchemaError(
                f"{labels_path}: {len(label_rows)} label rows for {data.shape[0]} value rows"
            )
        try:
            labels = np.array([int(r[0]) for r in label_rows], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{labels_path}: {exc}") from None
    return LabeledSeries(data, labels, name or values_path.stem)


def save_csv_dataset(series: LabeledSeries, values_path, labels_path=None) -> None:
    values_path = Path(values_path)
    with values_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"ch{j}" for j in range(series.channels)])
        for row in series.values:
            writer.writerow([repr(float(v)) for v in row])
    if labels_path is not None and series.labels is not None:
        with Path(labels_path).open("w", encoding="utf-8") as fh:
            fh.writelines(f"{int(v)}\n" for v in series.labels)


# ---------------------------------------------------------------------------
# Normalization and windowing
# ---------------------------------------------------------------------------

def zscore_normalize(series: LabeledSeries, stats: Optional[NormStats] = None):
    """Per-channel z-score. Stats are fitted on ``series`` when not supplied.

    Returns ``(normalized_series, stats)``.
    """
    if stats is None:
        stats = NormStats(series.values.mean(axis=0), series.values.std(axis=0))
    elif stats.channels != series.channels:
        raise SchemaError(f"stats have M={stats.channels}, series has M={series.channels}")
    values = (series.values - stats.mean) / stats.std
    return LabeledSeries(values, series.labels, series.name), stats


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values) * stats.std + stats.mean


def window_count(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def make_windows(series: LabeledSeries, window: int = 48, stride: int = 1) -> WindowBatch:
    if stride < 1:
        raise SizeError(f"window stride must be >= 1, got {stride}")
    if window < 1 or window > series.length:
        raise SizeError(f"window {window} does not fit a series of length {series.length}")
    starts = np.arange(window_count(series.length, window, stride)) * stride
    view = np.lib.stride_tricks.sliding_window_view(series.values, window, axis=0)
    # sliding_window_view puts the window axis last: (n, M, W)
    windows = np.ascontiguousarray(view[starts].transpose(0, 2, 1))
    return WindowBatch(windows, starts)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Generator parameters for :func:`synth_anomaly_series`.

    ``spikes`` holds ``(start, width)`` pairs and ``level_shifts`` holds
    ``(start, duration)`` pairs. When ``anomaly_ratio`` is set and no explicit
    injection is listed, injections are placed at random to cover
    ``round(anomaly_ratio * length)`` timesteps.
    """

    length: int = 1000
    channels: int = 3
    periods: Sequence[float] = (50.0, 120.0)
    noise_std: float = 0.1
    spikes: Sequence[tuple[int, int]] = field(default_factory=list)
    spike_magnitude: float = 6.0
    level_shifts: Sequence[tuple[int, int]] = field(default_factory=list)
    shift_magnitude: float = 3.0
    anomaly_ratio: Optional[float] = None
    name: str = "synthetic"


def _random_injections(spec: SynthSpec, rng: np.random.Generator):
    target = int(round(spec.anomaly_ratio * spec.length))
    free = np.ones(spec.length, dtype=bool)
    spikes, shifts = [], []
    remaining = target
    attempts = 0
    while remaining > 0:
        attempts += 1
        if attempts > 100_000:
            raise SpecError(f"could not place {target} anomalous timesteps without overlap")
        if remaining <= 3 or rng.random() < 0.5:
            width = int(min(remaining, rng.integers(1, 4)))
            kind = spikes
        else:
            width = int(min(remaining, rng.integers(10, 60)))
            kind = shifts
        start = int(rng.integers(0, spec.length - width + 1))
        if not free[start:start + width].all():
            continue
        free[start:start + width] = False
        kind.append((start, width))
        remaining -= width
    return spikes, shifts


def synth_anomaly_series(spec: SynthSpec, seed: int = 0) -> LabeledSeries:
    """Sum-of-sinusoids base signal with Gaussian noise, spikes and level shifts.

    Labels are 1 exactly on injected timesteps.
    """
    if spec.length < 1 or spec.channels < 1:
        raise SpecError("length and channels must be >= 1")
    if spec.anomaly_ratio is not None and not 0 <= spec.anomaly_ratio < 1:
        raise SpecError(f"anomaly ratio must lie in [0, 1), got {spec.anomaly_ratio}")
    rng = np.random.default_rng(seed)

    t = np.arange(spec.length, dtype=np.float64)[:, None]
    phases = rng.uniform(0, 2 * math.pi, size=(len(spec.periods), spec.channels))
    clean = np.zeros((spec.length, spec.channels))
    for k, period in enumerate(spec.periods):
        clean += np.sin(2 * math.pi * t / period + phases[k]) / (k + 1)
    values = clean + rng.normal(0.0, spec.noise_std, size=clean.shape)
    sigma = clean.std(axis=0) + spec.noise_std

    spikes, shifts = list(spec.spikes), list(spec.level_shifts)
    if spec.anomaly_ratio is not None and not spikes and not shifts:
        spikes, shifts = _random_injections(spec, rng)

    labels = np.zeros(spec.length, dtype=np.int64)
    for start, width in sorted(spikes + shifts):
        if width < 1 or start < 0 or start + width > spec.length:
            raise SpecError(f"injection ({start}, {width}) outside [0, {spec.length})")
        if labels[start:start + width].any():
            raise SpecError(f"injection ({start}, {width}) overlaps another injection")
        labels[start:start + width] = 1
    if labels.mean() >= 1:
        raise SpecError("anomaly ratio must be < 1")

    def affected_channels():
        n = int(rng.integers(1, spec.channels + 1))
        return rng.choice(spec.channels, size=n, replace=False)

    for start, width in spikes:
        chans = affected_channels()
        sign = rng.choice([-1.0, 1.0], size=len(chans))
        values[start:start + width, chans] += sign * spec.spike_magnitude * sigma[chans]
    for start, width in shifts:
        chans = affected_channels()
        sign = rng.choice([-1.0, 1.0], size=len(chans))
        values[start:start + width, chans] += sign * spec.shift_magnitude * sigma[chans]
    return LabeledSeries(values, labels, spec.name)
