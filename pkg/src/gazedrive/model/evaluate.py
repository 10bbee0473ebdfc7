"""Offline evaluation of gaze predictors and driving agents."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from ..attention import AttentionMap
from ..metrics import MetricConfig, correlation_coefficient, kl_divergence, multitask_error
from .nets import DrivingAgent, GazeNet, model_dtype


@dataclass(frozen=True)
class SplitScore:
    kl: float
    cc: float
    frames: int


@dataclass(frozen=True)
class GazeReport:
    overall: SplitScore
    driving: Optional[SplitScore]


def _score(kls, ccs) -> SplitScore:
    defined = [c for c in ccs if not np.isnan(c)]
    cc = float(np.mean(defined)) if defined else float("nan")
    return SplitScore(float(np.mean(kls)), cc, len(kls))


def _cc_or_nan(truth: AttentionMap, pred: AttentionMap) -> float:
    """CC, or NaN when either map has zero variance (e.g. a uniform predictor)."""
    if truth.shape == pred.shape and (np.ptp(truth.values) == 0 or np.ptp(pred.values) == 0):
        return float("nan")
    return correlation_coefficient(truth, pred)


def gaze_predictions(model: GazeNet, frames, batch_size: int = 32) -> List[AttentionMap]:
    out = []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            idx = list(range(start, min(len(frames), start + batch_size)))
            clips, commands, _ = frames.batch(idx, model_dtype(model))
            out.extend(AttentionMap.from_field(p) for p in model(clips, commands).double().numpy())
    return out


def evaluate_gaze(predictor, frames, cfg: MetricConfig = MetricConfig()) -> GazeReport:
    """Mean per-frame KL and CC over all frames and over the driving-labelled frames.

    Frames where CC is undefined (a constant map) are left out of the CC mean.

    ``predictor`` is a :class:`GazeNet`, a list of maps aligned with ``frames``,
    or a callable ``i -> AttentionMap``.
    """
    if len(frames) == 0:
        raise ValueError("no frames to evaluate")
    if isinstance(predictor, GazeNet):
        preds = gaze_predictions(predictor, frames)
    elif callable(predictor):
        preds = [predictor(i) for i in range(len(frames))]
    else:
        preds = list(predictor)
    kls = [kl_divergence(frames.truths[i], preds[i], cfg) for i in range(len(frames))]
    ccs = [_cc_or_nan(frames.truths[i], preds[i]) for i in range(len(frames))]
    drive = [i for i, lab in enumerate(frames.labels) if lab == "driving"]
    driving = _score([kls[i] for i in drive], [ccs[i] for i in drive]) if drive else None
    return GazeReport(_score(kls, ccs), driving)


def agent_predictions(model: DrivingAgent, frames, batch_size: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            images, speed, commands, _ = frames.batch(range(start, min(len(frames), start + batch_size)), model_dtype(model))
            out.append(model(images, speed, commands).double().numpy())
    return np.concatenate(out)


def evaluate_agent(predictor, frames, cfg: MetricConfig = MetricConfig()):
    """Open-loop ``(multitask MSE, multitask MAE)`` over the frames.

    ``predictor`` is a :class:`DrivingAgent`, an (N, 4) prediction array or a
    callable ``i -> (steer, throttle, brake, speed)``.
    """
    if len(frames) == 0:
        raise ValueError("no frames to evaluate")
    if isinstance(predictor, DrivingAgent):
        preds = agent_predictions(predictor, frames)
    elif callable(predictor):
        preds = np.array([tuple(predictor(i)) for i in range(len(frames))], dtype=np.float64)
    else:
        preds = np.asarray(predictor, dtype=np.float64)
    return (
        multitask_error(preds, frames.targets, cfg, "mse"),
        multitask_error(preds, frames.targets, cfg, "mae"),
    )


def agent_eval_fn(frames, cfg: MetricConfig = MetricConfig()) -> Callable:
    return lambda model: evaluate_agent(model, frames, cfg)
