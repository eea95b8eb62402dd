"""Training under the frozen-backbone contract and per-timestep anomaly scoring."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig
from .data import LabeledSeries, NormStats, WindowBatch
from .errors import DataError, NumericsError, ShapeError, SizeError
from .model import TriPModel

log = logging.getLogger(__name__)


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}")
    return torch.mean((recon - target) ** 2)


@dataclass
class TrainedModel:
    model: TriPModel
    fingerprint_start: int
    fingerprint_end: int
    history: list[float] = field(default_factory=list)
    norm_stats: Optional[NormStats] = None

    @property
    def config(self):
        return self.model.config


def _as_tensor(windows, dtype) -> torch.Tensor:
    if isinstance(windows, WindowBatch):
        windows = windows.windows
    return torch.as_tensor(np.asarray(windows), dtype=dtype)


def train(model: TriPModel, windows, hyper: Optional[TrainConfig] = None,
          norm_stats: Optional[NormStats] = None) -> TrainedModel:
    """Adam on the trainable tensors only, MSE loss, gradient-norm clipping.

    ``windows`` is a :class:`WindowBatch` or a ``(N, W, M)`` array. The run is
    deterministic for a fixed ``hyper.seed``.
    """
    hyper = hyper or model.config.train
    dtype = next(model.parameters()).dtype
    data = _as_tensor(windows, dtype)
    if data.shape[0] == 0:
        raise DataError("no training windows")

    params = [p for _, p in model.trainable_parameters()]
    optimizer = torch.optim.Adam(params, lr=hyper.lr)
    gen = torch.Generator().manual_seed(hyper.seed)
    fp_start = model.backbone.fingerprint()
    history: list[float] = []
    steps = 0
    n = data.shape[0]

    model.train()
    for epoch in range(hyper.epochs):
        order = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for i in range(0, n, hyper.batch_size):
            batch = data[order[i:i + hyper.batch_size]]
            loss = reconstruction_loss(model(batch), batch)
            if not torch.isfinite(loss):
                raise NumericsError(f"non-finite loss {loss.item()} at epoch {epoch}, step {steps}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if hyper.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, hyper.grad_clip)
            optimizer.step()
            total += loss.item() * batch.shape[0]
            seen += batch.shape[0]
            steps += 1
            if hyper.max_steps and steps >= hyper.max_steps:
                break
        history.append(total / seen)
        log.info("epoch %d: mean loss %.6f", epoch, history[-1])
        if hyper.max_steps and steps >= hyper.max_steps:
            break
    model.eval()
    return TrainedModel(model, fp_start, model.backbone.fingerprint(), history, norm_stats)


@dataclass
class AnomalyScoreSeries:
    scores: np.ndarray
    labels: Optional[np.ndarray] = None


def score_window_starts(length: int, window: int, stride: int) -> np.ndarray:
    """Window starts at multiples of ``stride`` plus a final tail-aligned window."""
    if length < window:
        raise SizeError(f"test series of length {length} is shorter than the window {window}")
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return np.asarray(starts)


def aggregate_window_scores(per_window: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    """Average ``(n, W)`` per-window timestep scores into a length-``length`` series."""
    n, W = per_window.shape
    total = np.zeros(length)
    count = np.zeros(length)
    for start, row in zip(starts, per_window):
        total[start:start + W] += row
        count[start:start + W] += 1
    return total / count


def moving_average(scores: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return scores
    kernel = np.ones(width) / width
    padded = np.pad(scores, (width - 1, 0), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def anomaly_score(model, test: LabeledSeries, stride: int = 0, smooth: int = 0,
                  batch_size: int = 64) -> AnomalyScoreSeries:
    """Per-timestep channel-mean squared reconstruction error.

    ``stride`` 0 means non-overlapping windows (stride = W); overlapping
    window scores are averaged per timestep.
    """
    if isinstance(model, TrainedModel):
        model = model.model
    W = model.config.window
    starts = score_window_starts(test.length, W, stride or W)
    dtype = next(model.parameters()).dtype
    values = torch.as_tensor(test.values, dtype=dtype)
    per_window = np.empty((len(starts), W))
    model.eval()
    with torch.no_grad():
        for i in range(0, len(starts), batch_size):
            chunk = starts[i:i + batch_size]
            batch = torch.stack([values[s:s + W] for s in chunk])
            err = ((model(batch) - batch) ** 2).mean(dim=2)
            per_window[i:i + len(chunk)] = err.double().numpy()
    scores = moving_average(aggregate_window_scores(per_window, starts, test.length), smooth)
    if not np.all(np.isfinite(scores)):
        raise NumericsError("non-finite anomaly scores")
    return AnomalyScoreSeries(scores, test.labels)


def write_scores_csv(path, result: AnomalyScoreSeries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if result.labels is None:
            fh.write("index,score\n")
            fh.writelines(f"{i},{s!r}\n" for i, s in enumerate(result.scores.tolist()))
        else:
            fh.write("index,score,label\n")
            fh.writelines(
                f"{i},{s!r},{int(y)}\n" for i, (s, y) in enumerate(zip(result.scores.tolist(), result.labels))
            )


def read_scores_csv(path) -> AnomalyScoreSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "score" not in rows[0]:
        raise DataError(f"{path}: expected a header 'index,score[,label]'")
    scores = np.array([float(r["score"]) for r in rows])
    labels = None
    if "label" in rows[0] and rows[0]["label"] is not None:
        labels = np.array([int(r["label"]) for r in rows])
    if not np.all(np.isfinite(scores)):
        raise DataError(f"{path}: non-finite score")
    return AnomalyScoreSeries(scores, labels)
