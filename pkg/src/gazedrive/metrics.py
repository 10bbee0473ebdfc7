"""Saliency-map comparison metrics and task-weighted control errors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .attention import AttentionMap

TASKS = ("steer", "throttle", "brake", "speed")
DEFAULT_EPSILON = 1e-7
DEFAULT_TASK_WEIGHTS = (0.5, 0.2, 0.2, 0.1)


@dataclass(frozen=True)
class MetricConfig:
    epsilon: float = DEFAULT_EPSILON
    task_weights: tuple = DEFAULT_TASK_WEIGHTS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        w = tuple(float(x) for x in self.task_weights)
        if len(w) != 4 or any(x < 0 or not np.isfinite(x) for x in w) or not any(x > 0 for x in w):
            raise ValueError(f"need four non-negative task weights with one positive, got {w}")
        object.__setattr__(self, "task_weights", w)


class ControlSignal(NamedTuple):
    steer: float
    throttle: float
    brake: float
    speed: float

    def validate(self) -> "ControlSignal":
        if not -1.0 <= self.steer <= 1.0:
            raise ValueError(f"steer out of range: {self.steer}")
        if not 0.0 <= self.throttle <= 1.0:
            raise ValueError(f"throttle out of range: {self.throttle}")
        if not 0.0 <= self.brake <= 1.0:
            raise ValueError(f"brake out of range: {self.brake}")
        if not self.speed >= 0.0:
            raise ValueError(f"speed must be non-negative: {self.speed}")
        return self


def _pair(truth: AttentionMap, pred: AttentionMap):
    if truth.shape != pred.shape:
        raise ValueError(f"map sizes differ: {truth.shape} vs {pred.shape}")
    if truth.empty or pred.empty:
        raise ValueError("metric undefined for an empty attention map")
    return truth.values, pred.values


def kl_divergence(truth: AttentionMap, pred: AttentionMap, cfg: MetricConfig = MetricConfig()) -> float:
    """sum_i Y(i) * log(eps + Y(i) / (eps + Yhat(i)))."""
    y, yhat = _pair(truth, pred)
    eps = cfg.epsilon
    return float(np.sum(y * np.log(eps + y / (eps + yhat))))


def correlation_coefficient(a: AttentionMap, b: AttentionMap) -> float:
    """Pearson correlation of the two flattened grids."""
    if a.shape != b.shape:
        raise ValueError(f"map sizes differ: {a.shape} vs {b.shape}")
    x = a.values.ravel() - a.values.mean()
    y = b.values.ravel() - b.values.mean()
    sx, sy = np.sqrt(np.dot(x, x)), np.sqrt(np.dot(y, y))
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for a constant map")
    return float(np.clip(np.dot(x, y) / (sx * sy), -1.0, 1.0))


def _as_controls(rows) -> np.ndarray:
    arr = np.array([tuple(r) for r in rows], dtype=np.float64) if not isinstance(rows, np.ndarray) else rows
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected rows of (steer, throttle, brake, speed), got shape {arr.shape}")
    return arr


def per_task_error(preds, targets, mode: str = "mse") -> np.ndarray:
    p, t = _as_controls(preds), _as_controls(targets)
    if len(p) == 0:
        raise ValueError("no samples")
    if p.shape != t.shape:
        raise ValueError(f"prediction/target length mismatch: {len(p)} vs {len(t)}")
    d = p - t
    if mode == "mse":
        return np.mean(d * d, axis=0)
    if mode == "mae":
        return np.mean(np.abs(d), axis=0)
    raise ValueError(f"mode must be 'mse' or 'mae', got {mode!r}")


def multitask_error(preds, targets, cfg: MetricConfig = MetricConfig(), mode: str = "mse") -> float:
    """Weighted mean of per-task errors, ``sum_k w_k err_k / sum_k w_k``."""
    err = per_task_error(preds, targets, mode.lower())
    w = np.asarray(cfg.task_weights)
    return float(np.dot(w, err) / w.sum())


def mean_map_scores(truths: Sequence[AttentionMap], preds: Sequence[AttentionMap], cfg: MetricConfig = MetricConfig()):
    """Per-frame KL and CC averaged uniformly; returns ``(mean_kl, mean_cc, n)``."""
    kls, ccs = [], []
    for y, yhat in zip(truths, preds):
        kls.append(kl_divergence(y, yhat, cfg))
        ccs.append(correlation_coefficient(y, yhat))
    if not kls:
        raise ValueError("no frames to score")
    return float(np.mean(kls)), float(np.mean(ccs)), len(kls)
