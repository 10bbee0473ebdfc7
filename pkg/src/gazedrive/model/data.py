"""Turning episodes into gaze-net and agent training samples."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from ..attention import AttentionMap, MapConfig, frame_attention_map, mean_fixation_map
from ..commands import HighLevelCommand, gaze_branch_for
from .nets import model_dtype
from ..masking import MaskConfig, baseline_mask, hard_mask, soft_mask

log = logging.getLogger(__name__)


def clip_indices(t: int, clip_length: int) -> list:
    """Frames ``t - N + 1 .. t``; indices before the episode start repeat frame 0."""
    return [max(0, t - clip_length + 1 + k) for k in range(clip_length)]


def to_chw(images: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """(..., H, W, C) array -> (..., C, H, W) tensor."""
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    return x.movedim(-1, -3).contiguous()


@dataclass
class GazeFrames:
    """Frames with non-empty ground-truth maps, ready for the gaze network."""

    images: List[np.ndarray]  # per episode, (T, H, W, C)
    keys: List[tuple]  # (episode, frame)
    commands: List[HighLevelCommand]
    truths: List[AttentionMap]
    labels: List[str]
    clip_length: int

    def __len__(self):
        return len(self.keys)

    def clip(self, i: int) -> np.ndarray:
        e, t = self.keys[i]
        return self.images[e][clip_indices(t, self.clip_length)]

    def batch(self, idx: Sequence[int], dtype=torch.float64):
        clips = to_chw(np.stack([self.clip(i) for i in idx]), dtype)
        commands = [gaze_branch_for(self.commands[i]) for i in idx]
        truths = torch.as_tensor(np.stack([self.truths[i].values for i in idx]), dtype=dtype)
        return clips, commands, truths

    def subset(self, idx: Sequence[int]) -> "GazeFrames":
        idx = list(idx)
        return GazeFrames(
            self.images,
            [self.keys[i] for i in idx],
            [self.commands[i] for i in idx],
            [self.truths[i] for i in idx],
            [self.labels[i] for i in idx],
            self.clip_length,
        )

    def driving_only(self) -> "GazeFrames":
        return self.subset([i for i, lab in enumerate(self.labels) if lab == "driving"])


def build_gaze_frames(episodes, clip_length: int = 4, map_cfg: MapConfig = MapConfig(), truths=None) -> GazeFrames:
    """Collect every frame whose ground-truth fixation map is non-empty.

    ``truths`` may supply precomputed per-episode map lists.
    """
    images, keys, commands, maps, labels = [], [], [], [], []
    for e, ep in enumerate(episodes):
        images.append(np.asarray(ep.images))
        ep_truths = truths[e] if truths is not None else None
        for t in range(len(ep)):
            m = ep_truths[t] if ep_truths is not None else frame_attention_map(ep, t, map_cfg)
            if m.empty:
                continue
            keys.append((e, t))
            commands.append(HighLevelCommand(ep.commands[t]))
            maps.append(m)
            labels.append(ep.labels[t])
    return GazeFrames(images, keys, commands, maps, labels, clip_length)


def episode_truth_maps(episode, map_cfg: MapConfig = MapConfig()) -> List[AttentionMap]:
    return [frame_attention_map(episode, t, map_cfg) for t in range(len(episode))]


def predict_episode_maps(model, episode, batch_size: int = 32) -> List[AttentionMap]:
    """Gaze-net map for every frame, branch chosen by the frame's recorded command."""
    n = len(episode)
    N = model.cfg.clip_length
    dtype = model_dtype(model)
    images = np.asarray(episode.images)
    out: List[Optional[AttentionMap]] = []
    no_command = 0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            ts = range(start, min(n, start + batch_size))
            clips = to_chw(np.stack([images[clip_indices(t, N)] for t in ts]), dtype)
            cmds = []
            for t in ts:
                c = HighLevelCommand(episode.commands[t])
                no_command += c is HighLevelCommand.NO_COMMAND
                cmds.append(gaze_branch_for(c))
            probs = model(clips, cmds).double().numpy()
            out.extend(AttentionMap.from_field(p) for p in probs)
    if no_command:
        log.info("%d frames without a command used the follow branch", no_command)
    return out


def mean_map_of(truth_lists) -> AttentionMap:
    return mean_fixation_map([m for maps in truth_lists for m in maps])


@dataclass
class AgentFrames:
    inputs: tuple  # one or two (T, H, W, C) float32 arrays
    speed: np.ndarray
    commands: np.ndarray
    targets: np.ndarray  # (T, 4)
    labels: List[str]

    def __len__(self):
        return len(self.speed)

    def batch(self, idx: Sequence[int], dtype=torch.float64):
        idx = np.asarray(idx)
        images = tuple(to_chw(x[idx], dtype) for x in self.inputs)
        speed = torch.as_tensor(self.speed[idx], dtype=dtype)
        targets = torch.as_tensor(self.targets[idx], dtype=dtype)
        return images, speed, [int(c) for c in self.commands[idx]], targets

    @staticmethod
    def concat(parts: Sequence["AgentFrames"]) -> "AgentFrames":
        k = len(parts[0].inputs)
        return AgentFrames(
            tuple(np.concatenate([p.inputs[j] for p in parts]) for j in range(k)),
            np.concatenate([p.speed for p in parts]),
            np.concatenate([p.commands for p in parts]),
            np.concatenate([p.targets for p in parts]),
            [lab for p in parts for lab in p.labels],
        )


def masked_images(variant: str, images: np.ndarray, maps=None, mean_map=None, mask_cfg: MaskConfig = MaskConfig()):
    """The image stream(s) an agent variant consumes, as float32 arrays."""
    if variant == "raw":
        return (images.astype(np.float32),)
    if variant == "baseline":
        return (np.stack([baseline_mask(img, mean_map) for img in images]).astype(np.float32),)
    hard = np.stack([hard_mask(img, m) for img, m in zip(images, maps)]).astype(np.float32)
    if variant == "hard":
        return (hard,)
    if variant == "dual":
        return (images.astype(np.float32), hard)
    if variant == "soft":
        return (np.stack([soft_mask(img, m, mask_cfg) for img, m in zip(images, maps)]).astype(np.float32),)
    raise ValueError(f"unknown variant {variant!r}")


def build_agent_frames(episode, variant: str, maps=None, mean_map=None, mask_cfg: MaskConfig = MaskConfig()) -> AgentFrames:
    images = np.asarray(episode.images)
    inputs = masked_images(variant, images, maps, mean_map, mask_cfg)
    controls = np.asarray(episode.controls, dtype=np.float64)
    return AgentFrames(
        inputs,
        controls[:, 3].copy(),
        np.array([int(c) for c in episode.commands], dtype=np.int64),
        controls.copy(),
        list(episode.labels),
    )
