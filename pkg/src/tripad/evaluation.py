"""Threshold-free and classical detection metrics over (scores, labels).

PATE here is a proximity-weighted AUC-PR averaged over a grid of pre/post
event buffers. The weight function is isolated in :func:`proximity_weights`
so it can be swapped without touching the curve code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateLabelsError, ShapeError

DEFAULT_BUFFERS = tuple(range(0, 21, 2))


@dataclass(frozen=True)
class PateConfig:
    pre_buffers: Sequence[int] = field(default=DEFAULT_BUFFERS)
    post_buffers: Sequence[int] = field(default=DEFAULT_BUFFERS)

    def __post_init__(self):
        if not self.pre_buffers or not self.post_buffers:
            raise ConfigError("buffer grids must be non-empty")
        if min(self.pre_buffers) < 0 or min(self.post_buffers) < 0:
            raise ConfigError("buffer lengths must be >= 0")


@dataclass(frozen=True)
class EvalReport:
    pate: float
    auc_roc: float
    auc_pr: float
    best_f1: float
    best_f1_threshold: float

    def as_dict(self) -> dict[str, float]:
        return {
            "pate": self.pate,
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "best_f1": self.best_f1,
            "best_f1_threshold": self.best_f1_threshold,
        }


def _prepare(scores, labels, need_both_classes: bool = True):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores vs {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ShapeError("labels must be 0 or 1")
    labels = labels.astype(np.float64)
    if need_both_classes and (labels.min() == labels.max()):
        raise DegenerateLabelsError("labels must contain both classes")
    return scores, labels


def _descending_cumulative(scores: np.ndarray, weights: np.ndarray):
    """Cumulative positive/negative mass predicted at each distinct threshold,
    thresholds visited from the highest score down (prediction = score >= t)."""
    order = np.argsort(-scores, kind="mergesort")
    s, w = scores[order], weights[order]
    tp = np.cumsum(w)
    fp = np.cumsum(1.0 - w)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return s[last], tp[last], fp[last]


def _step_pr_area(tp: np.ndarray, fp: np.ndarray, positives: float) -> float:
    precision = tp / (tp + fp)
    recall = tp / positives
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def auc(scores, labels, mode: str = "roc") -> float:
    """AUC-ROC (trapezoid) or AUC-PR (step-wise) over all unique thresholds."""
    scores, labels = _prepare(scores, labels)
    _, tp, fp = _descending_cumulative(scores, labels)
    if mode == "pr":
        return _step_pr_area(tp, fp, labels.sum())
    if mode != "roc":
        raise ConfigError(f"unknown AUC mode {mode!r}")
    tpr = np.r_[0.0, tp / labels.sum()]
    fpr = np.r_[0.0, fp / (labels.size - labels.sum())]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def best_f1(scores, labels) -> tuple[float, float]:
    """Best point-wise F1 over every unique score threshold (score >= t) and
    the empty prediction (threshold ``+inf``). Ties go to the higher threshold."""
    scores, labels = _prepare(scores, labels)
    thr, tp, fp = _descending_cumulative(scores, labels)
    positives = labels.sum()
    f1 = 2 * tp / (tp + fp + positives)
    best, best_thr = 0.0, math.inf
    for t, f in zip(thr, f1):  # descending: strict > keeps the higher threshold on ties
        if f > best:
            best, best_thr = float(f), float(t)
    return best, best_thr


def label_events(labels) -> list[tuple[int, int]]:
    """Maximal runs of 1s as half-open ``(start, end)`` intervals."""
    labels = np.asarray(labels).astype(np.int8)
    padded = np.r_[0, labels, 0]
    edges = np.diff(padded)
    return list(zip(np.nonzero(edges == 1)[0].tolist(), np.nonzero(edges == -1)[0].tolist()))


def proximity_weights(labels, pre: int, post: int) -> np.ndarray:
    """1 inside events, linear ramps of ``pre`` steps before and ``post`` steps
    after each event, 0 elsewhere; overlapping contributions take the max."""
    labels = np.asarray(labels)
    n = labels.size
    w = labels.astype(np.float64).copy()
    for start, end in label_events(labels):
        for gap in range(1, pre + 1):
            t = start - gap
            if t < 0:
                break
            w[t] = max(w[t], (pre - gap + 1) / (pre + 1))
        for gap in range(1, post + 1):
            t = end - 1 + gap
            if t >= n:
                break
            w[t] = max(w[t], (post - gap + 1) / (post + 1))
    return w


def weighted_pr_area(scores: np.ndarray, weights: np.ndarray) -> float:
    _, tp, fp = _descending_cumulative(scores, weights)
    return _step_pr_area(tp, fp, weights.sum())


def pate(scores, labels, cfg: PateConfig | None = None) -> float:
    cfg = cfg or PateConfig()
    scores, labels = _prepare(scores, labels, need_both_classes=False)
    if not labels.any():
        raise DegenerateLabelsError("PATE needs at least one anomaly event")
    areas = [
        weighted_pr_area(scores, proximity_weights(labels, e, d))
        for e in cfg.pre_buffers
        for d in cfg.post_buffers
    ]
    return float(np.mean(areas))


def evaluate(scores, labels, cfg: PateConfig | None = None) -> EvalReport:
    f1, thr = best_f1(scores, labels)
    return EvalReport(
        pate=pate(scores, labels, cfg),
        auc_roc=auc(scores, labels, "roc"),
        auc_pr=auc(scores, labels, "pr"),
        best_f1=f1,
        best_f1_threshold=thr,
    )


def format_report(report: EvalReport) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in report.as_dict().items())


def report_csv(report: EvalReport) -> str:
    d = report.as_dict()
    return ",".join(d) + "\n" + ",".join(repr(v) for v in d.values()) + "\n"
