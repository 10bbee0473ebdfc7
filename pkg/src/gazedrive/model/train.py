"""Losses, single optimisation steps and training loops."""

from __future__ import annotations

import logging
from typing import Callable, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..commands import HighLevelCommand
from .nets import DrivingAgent, GazeNet, _group, model_dtype, position_channels

log = logging.getLogger(__name__)


def kl_loss(truth: torch.Tensor, pred: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-sample sum_i Y log(eps + Y / (eps + Yhat)), averaged over the batch."""
    terms = truth * torch.log(eps + truth / (eps + pred))
    return terms.flatten(1).sum(dim=1).mean()


def _kl_rows(truth, pred, eps):
    return (truth * torch.log(eps + truth / (eps + pred))).flatten(1).sum(dim=1)


def crop_offsets(rng: np.random.Generator, n: int, input_size, crop_size) -> list:
    (W, H), (w, h) = input_size, crop_size
    return [(int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))) for _ in range(n)]


def crop_losses(stream, clips, truths, offsets, crop_size, eps) -> torch.Tensor:
    """Per-sample KL of the COARSE map on a raw-resolution crop vs the renormalised truth crop.

    Samples whose truth has no mass inside the crop contribute zero.
    """
    w, h = crop_size
    crops = torch.stack([clips[k, :, :, oy : oy + h, ox : ox + w] for k, (oy, ox) in enumerate(offsets)])
    t = torch.stack([truths[k, oy : oy + h, ox : ox + w] for k, (oy, ox) in enumerate(offsets)])
    mass = t.flatten(1).sum(dim=1)
    keep = mass > 0
    if not bool(keep.any()):
        return torch.zeros(len(offsets), dtype=clips.dtype)
    kept = [o for o, k in zip(offsets, keep.tolist()) if k]
    position = position_channels(kept, 1.0, crop_size, stream.cfg.input_size, clips.dtype)
    logits = stream.coarse_logits(crops[keep], position)
    p = F.softmax(logits.flatten(1), dim=1).reshape(-1, h, w)
    out = torch.zeros(len(offsets), dtype=clips.dtype)
    out[keep] = _kl_rows(t[keep] / mass[keep][:, None, None], p, eps)
    return out


def coarse_full_loss(stream, clips, truths, coarse_size, eps) -> torch.Tensor:
    """KL of the COARSE map on the resized clip against the area-resized truth (mean over batch)."""
    w, h = coarse_size
    B, N, C, H, W = clips.shape
    small = F.interpolate(clips.reshape(B * N, C, H, W), size=(h, w), mode="area").reshape(B, N, C, h, w)
    logits = stream.coarse_logits(small, stream.full_position(B, clips.dtype))
    p = F.softmax(logits.reshape(B, -1), dim=1).reshape(B, h, w)
    t = F.interpolate(truths[:, None], size=(h, w), mode="area")[:, 0]
    t = t / t.flatten(1).sum(dim=1)[:, None, None]
    return _kl_rows(t, p, eps).mean()


def gaze_loss(model: GazeNet, batch, rng: Optional[np.random.Generator], phase: int = 2, crop: Optional[bool] = None):
    """Full-frame KL plus, when enabled, the cropped-stream KL (mean over the batch).

    Phase 1 trains each input stream on its own output; phase 2 trains the fused output.
    """
    clips, commands, truths = batch
    if len(commands) == 0:
        raise ValueError("empty batch")
    cfg = model.cfg
    crop = cfg.crop_stream if crop is None else crop
    eps = cfg.epsilon
    total = torch.zeros((), dtype=clips.dtype)
    offsets = crop_offsets(rng, len(commands), cfg.input_size, cfg.coarse_size) if crop else None
    for cmd, idx in _group(commands).items():
        branch = model.branch(cmd)
        c, y = clips[idx], truths[idx]
        fused, streams = branch(c)
        if phase == 1 and len(streams) > 1:
            full = sum(_kl_rows(y, lp.exp(), eps) for lp, _, _ in streams.values())
        else:
            full = _kl_rows(y, fused, eps)
        total = total + full.sum()
        if crop:
            offs = [offsets[i] for i in idx]
            for name, (_, _, stream_input) in streams.items():
                stream = getattr(branch, name)
                total = total + crop_losses(stream, stream_input, y, offs, cfg.coarse_size, eps).sum()
    return total / len(commands)


def gaze_train_step(batch, model: GazeNet, optimizer, rng: np.random.Generator, phase: int = 2, crop: Optional[bool] = None) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = gaze_loss(model, batch, rng, phase, crop)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite gaze loss")
    loss.backward()
    optimizer.step()
    return loss.item()


def agent_loss(model: DrivingAgent, batch) -> torch.Tensor:
    """Task-weighted MSE: sum_k w_k mse_k / sum_k w_k."""
    images, speed, commands, targets = batch
    if len(commands) == 0:
        raise ValueError("empty batch")
    pred = model(images, speed, commands)
    mse = ((pred - targets) ** 2).mean(dim=0)
    w = torch.as_tensor(model.cfg.task_weights, dtype=pred.dtype)
    return (w * mse).sum() / w.sum()


def agent_train_step(batch, model: DrivingAgent, optimizer) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = agent_loss(model, batch)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite agent loss")
    loss.backward()
    optimizer.step()
    return loss.item()


def sgd(model, lr: float):
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=0.0)


def batch_order(rng: np.random.Generator, n: int, batch_size: int, steps: int):
    """Deterministic minibatch indices: reshuffle each pass over the data."""
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


def train_gaze(
    model: GazeNet,
    frames,
    steps: int,
    batch_size: int = 8,
    seed: int = 0,
    log_fn: Optional[Callable] = None,
) -> List[float]:
    """SGD on the gaze net; returns the per-step loss curve.

    With ``cfg.shared_warmup_steps`` the first steps train the Follow branch on
    every frame regardless of command; its weights then seed all branches.
    """
    if len(frames) == 0:
        raise ValueError("no training frames")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    opt = sgd(model, cfg.lr)
    losses = []
    for step, idx in enumerate(batch_order(rng, len(frames), min(batch_size, len(frames)), steps)):
        phase = 1 if cfg.two_phase and step < cfg.phase1_steps else 2
        batch = frames.batch(idx, model_dtype(model))
        if step < cfg.shared_warmup_steps:
            batch = (batch[0], [HighLevelCommand.FOLLOW] * len(idx), batch[2])
        elif step == cfg.shared_warmup_steps and step > 0:
            model.broadcast_branch(HighLevelCommand.FOLLOW)
        loss = gaze_train_step(batch, model, opt, rng, phase)
        losses.append(loss)
        if log_fn:
            log_fn(step, loss)
    if 0 < steps <= cfg.shared_warmup_steps:
        model.broadcast_branch(HighLevelCommand.FOLLOW)
    return losses


def train_agent(
    model: DrivingAgent,
    frames,
    steps: int,
    batch_size: int = 32,
    seed: int = 0,
    log_fn: Optional[Callable] = None,
    eval_every: int = 0,
    eval_fn: Optional[Callable] = None,
):
    """SGD on an agent; returns ``(losses, series)`` where ``series`` holds
    ``(step, mse, mae)`` from ``eval_fn`` every ``eval_every`` steps."""
    if len(frames) == 0:
        raise ValueError("no training frames")
    rng = np.random.default_rng(seed)
    opt = sgd(model, model.cfg.lr)
    losses, series = [], []
    for step, idx in enumerate(batch_order(rng, len(frames), min(batch_size, len(frames)), steps)):
        losses.append(agent_train_step(frames.batch(idx, model_dtype(model)), model, opt))
        if log_fn:
            log_fn(step, losses[-1])
        if eval_every and eval_fn and (step + 1) % eval_every == 0:
            series.append((step + 1, *eval_fn(model)))
    return losses, series
