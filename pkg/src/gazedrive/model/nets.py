"""Toy-scale intention-branched gaze network and conditional driving agents.

Models train in float32 by default; build them with ``dtype="float64"`` for
finite-difference gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..commands import GAZE_COMMANDS, HighLevelCommand
from ..metrics import DEFAULT_EPSILON, DEFAULT_TASK_WEIGHTS

DTYPES = {"float32": torch.float32, "float64": torch.float64}
VARIANTS = ("raw", "hard", "soft", "baseline", "dual")
N_AGENT_HEADS = 5


def _seeded(seed: int, dtype: str, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = build()
    return module.to(DTYPES[dtype])


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


# --------------------------------------------------------------------------- gaze network


@dataclass(frozen=True)
class GazeNetConfig:
    clip_length: int = 4
    input_size: tuple = (64, 64)  # (width, height) of the original frames
    coarse_size: tuple = (16, 16)  # (width, height) of the resized clip and of the random crop
    channels: int = 3
    coarse_channels: tuple = (8, 16)
    refine_channels: tuple = (8, 8)
    second_stream: bool = False
    two_phase: bool = False
    phase1_steps: int = 0
    crop_stream: bool = True
    # command-agnostic warm start: train the Follow branch on every frame for
    # this many steps, copy it into all branches, then train per command
    shared_warmup_steps: int = 0
    lr: float = 1e-2
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        (W, H), (w, h) = self.input_size, self.coarse_size
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")
        if not (0 < w <= W and 0 < h <= H):
            raise ValueError(f"coarse size {self.coarse_size} must fit in input size {self.input_size}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.shared_warmup_steps < 0 or self.phase1_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("input_size", "coarse_size", "coarse_channels", "refine_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


N_POSITION_CHANNELS = 4


def position_channels(origins, step: float, size, frame_size, dtype=torch.float32) -> torch.Tensor:
    """Fixed absolute-position features ``(u, v, u^2, v^2)`` for a grid of cells.

    ``origins`` holds one ``(row, col)`` top-left pixel offset per sample, ``step``
    is the cell pitch in original pixels, ``size`` the grid ``(w, h)`` and
    ``frame_size`` the original ``(W, H)``.  ``u, v`` span [-1, 1] over the frame,
    so crops see their true position.  Returns ``(B, 4, h, w)``.
    """
    (w, h), (W, H) = size, frame_size
    out = []
    for oy, ox in origins:
        u = 2.0 * (ox + (torch.arange(w, dtype=torch.float64) + 0.5) * step) / W - 1.0
        v = 2.0 * (oy + (torch.arange(h, dtype=torch.float64) + 0.5) * step) / H - 1.0
        uu, vv = u[None, :].expand(h, w), v[:, None].expand(h, w)
        out.append(torch.stack([uu, vv, uu**2, vv**2]))
    return torch.stack(out).to(dtype)


class SaliencyStream(nn.Module):
    """COARSE 3-D conv predictor on a low-resolution clip plus a 2-D REFINE stage."""

    def __init__(self, cfg: GazeNetConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.coarse_channels
        self.coarse3d = nn.Sequential(
            nn.Conv3d(cfg.channels + N_POSITION_CHANNELS, c1, 3, padding=1),
            nn.SiLU(),
            nn.Conv3d(c1, c2, 3, padding=1),
            nn.SiLU(),
        )
        self.coarse_out = nn.Conv2d(c2, 1, 3, padding=1)
        layers = []
        cin = 1 + cfg.channels
        for cout in cfg.refine_channels:
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU()]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.refine = nn.Sequential(*layers)

    def coarse_logits(self, clip: torch.Tensor, position: torch.Tensor) -> torch.Tensor:
        """(B, N, C, h, w) clip and (B, 4, h, w) position features -> (B, h, w) log-saliency."""
        N = clip.shape[1]
        pos = position[:, :, None].expand(-1, -1, N, -1, -1)
        x = self.coarse3d(torch.cat([clip.permute(0, 2, 1, 3, 4), pos], dim=1))
        x = x.mean(dim=2)
        return self.coarse_out(x)[:, 0]

    def full_position(self, batch: int, dtype) -> torch.Tensor:
        """Position features of the resized full-frame grid."""
        (W, H), (w, h) = self.cfg.input_size, self.cfg.coarse_size
        pos = position_channels([(0, 0)], W / w, (w, h), (W, H), dtype)
        return pos.expand(batch, -1, -1, -1)

    def forward(self, clip: torch.Tensor):
        """Returns ``(full_logprob, coarse_logits)`` for a full-size clip."""
        B, N, C, H, W = clip.shape
        w, h = self.cfg.coarse_size
        small = F.interpolate(clip.reshape(B * N, C, H, W), size=(h, w), mode="area").reshape(B, N, C, h, w)
        coarse = self.coarse_logits(small, self.full_position(B, clip.dtype))
        coarse_lp = F.log_softmax(coarse.reshape(B, -1), dim=1).reshape(B, 1, h, w)
        # upsample as a density (mean 1) so the refine input is resolution independent
        up = F.interpolate(coarse_lp.exp() * (h * w), size=(H, W), mode="bilinear", align_corners=False)
        refined = self.refine(torch.cat([up, clip[:, -1]], dim=1))[:, 0]
        up_logp = torch.log(up[:, 0] + 1e-6)
        logits = refined + up_logp
        return F.log_softmax(logits.reshape(B, -1), dim=1).reshape(B, H, W), coarse


def frame_difference(clip: torch.Tensor) -> torch.Tensor:
    """Clamped absolute inter-frame difference; the first frame's difference is zero."""
    d = torch.zeros_like(clip)
    d[:, 1:] = (clip[:, 1:] - clip[:, :-1]).abs().clamp(0.0, 1.0)
    return d


class IntentionBranch(nn.Module):
    def __init__(self, cfg: GazeNetConfig):
        super().__init__()
        self.rgb = SaliencyStream(cfg)
        if cfg.second_stream:
            self.diff = SaliencyStream(cfg)
            W, H = cfg.input_size
            self.fusion = nn.Parameter(torch.zeros(H, W))

    def forward(self, clip: torch.Tensor, phase: int = 2):
        """Returns fused probability map and the per-stream outputs."""
        rgb_lp, rgb_coarse = self.rgb(clip)
        streams = {"rgb": (rgb_lp, rgb_coarse, clip)}
        if not hasattr(self, "diff"):
            return rgb_lp.exp(), streams
        dclip = frame_difference(clip)
        diff_lp, diff_coarse = self.diff(dclip)
        streams["diff"] = (diff_lp, diff_coarse, dclip)
        a = torch.sigmoid(self.fusion)
        fused = a * rgb_lp.exp() + (1 - a) * diff_lp.exp()
        return fused, streams


class GazeNet(nn.Module):
    """One saliency branch per high-level command."""

    def __init__(self, cfg: GazeNetConfig = GazeNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleDict({c.name.lower(): IntentionBranch(cfg) for c in GAZE_COMMANDS})

    @classmethod
    def create(cls, cfg: GazeNetConfig = GazeNetConfig()) -> "GazeNet":
        return _seeded(cfg.seed, cfg.dtype, lambda: cls(cfg))

    def branch(self, command) -> IntentionBranch:
        command = HighLevelCommand(command)
        if command is HighLevelCommand.NO_COMMAND:
            raise ValueError("the gaze network has no branch for NO_COMMAND")
        return self.branches[command.name.lower()]

    def broadcast_branch(self, command=HighLevelCommand.FOLLOW) -> None:
        """Copy one branch's parameters into every other branch."""
        state = self.branch(command).state_dict()
        for name, branch in self.branches.items():
            if name != HighLevelCommand(command).name.lower():
                branch.load_state_dict(state)

    def check_clip(self, clips: torch.Tensor):
        W, H = self.cfg.input_size
        expect = (self.cfg.clip_length, self.cfg.channels, H, W)
        if clips.ndim != 5 or tuple(clips.shape[1:]) != expect:
            raise ValueError(f"clip batch must be (B, {expect}), got {tuple(clips.shape)}")

    def forward(self, clips: torch.Tensor, commands: Sequence) -> torch.Tensor:
        """(B, N, C, H, W) clips -> (B, H, W) probability maps."""
        self.check_clip(clips)
        out = [None] * len(commands)
        for cmd, idx in _group(commands).items():
            probs, _ = self.branch(cmd)(clips[idx])
            for k, i in enumerate(idx):
                out[i] = probs[k]
        return torch.stack(out)


def _group(commands) -> dict:
    groups = {}
    for i, c in enumerate(commands):
        groups.setdefault(HighLevelCommand(int(c)), []).append(i)
    return groups


# --------------------------------------------------------------------------- driving agents


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "raw"
    image_size: tuple = (64, 64)  # (width, height)
    channels: int = 3
    conv_channels: tuple = (8, 16, 16)
    feature_dim: int = 64
    speed_dims: tuple = (16, 16)
    fusion_dims: tuple = (64, 64)
    head_dim: int = 32
    speed_scale: float = 10.0
    lr: float = 1e-2
    task_weights: tuple = DEFAULT_TASK_WEIGHTS
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown agent variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.task_weights) != 4 or any(w < 0 for w in self.task_weights) or sum(self.task_weights) <= 0:
            raise ValueError("need four non-negative task weights")
        if len(self.speed_dims) != 2 or len(self.fusion_dims) != 2:
            raise ValueError("speed and fusion stacks have exactly two dense layers")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def n_inputs(self) -> int:
        return 2 if self.variant == "dual" else 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("image_size", "conv_channels", "speed_dims", "fusion_dims", "task_weights"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class ConvEncoder(nn.Module):
    def __init__(self, cfg: AgentConfig):
        super().__init__()
        layers = []
        cin = cfg.channels
        for i, cout in enumerate(cfg.conv_channels):
            k = 5 if i == 0 else 3
            layers += [nn.Conv2d(cin, cout, k, stride=2, padding=k // 2), nn.SiLU()]
            cin = cout
        self.conv = nn.Sequential(*layers)
        W, H = cfg.image_size
        with torch.no_grad():
            n = self.conv(torch.zeros(1, cfg.channels, H, W)).numel()
        self.fc = nn.Sequential(nn.Linear(n, cfg.feature_dim), nn.SiLU())

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class DrivingAgent(nn.Module):
    """Conditional imitation agent with five command-selected heads.

    The dual variant runs a second convolutional encoder on the hard-masked
    image and concatenates both feature vectors before fusion.
    """

    def __init__(self, cfg: AgentConfig = AgentConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleList([ConvEncoder(cfg) for _ in range(cfg.n_inputs)])
        s1, s2 = cfg.speed_dims
        self.speed = nn.Sequential(nn.Linear(1, s1), nn.SiLU(), nn.Linear(s1, s2), nn.SiLU())
        f1, f2 = cfg.fusion_dims
        self.fusion = nn.Sequential(
            nn.Linear(cfg.feature_dim * cfg.n_inputs + s2, f1), nn.SiLU(), nn.Linear(f1, f2), nn.SiLU()
        )
        self.heads = nn.ModuleList(
            [nn.Sequential(nn.Linear(f2, cfg.head_dim), nn.SiLU(), nn.Linear(cfg.head_dim, 4)) for _ in range(N_AGENT_HEADS)]
        )
        # fan-in scaled init keeps activations from shrinking through the SiLU stack,
        # so plain SGD can pick up the speed input and image features early
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @classmethod
    def create(cls, cfg: AgentConfig = AgentConfig()) -> "DrivingAgent":
        return _seeded(cfg.seed, cfg.dtype, lambda: cls(cfg))

    def forward(self, images: Sequence[torch.Tensor], speed: torch.Tensor, commands) -> torch.Tensor:
        """Returns (B, 4): steer in [-1, 1], throttle and brake in [0, 1], speed > 0."""
        if len(images) != self.cfg.n_inputs:
            raise ValueError(f"{self.cfg.variant} agent takes {self.cfg.n_inputs} image input(s), got {len(images)}")
        W, H = self.cfg.image_size
        for x in images:
            if x.ndim != 4 or tuple(x.shape[1:]) != (self.cfg.channels, H, W):
                raise ValueError(f"image batch must be (B, {self.cfg.channels}, {H}, {W}), got {tuple(x.shape)}")
        feats = [enc(x) for enc, x in zip(self.encoders, images)]
        sp = self.speed((speed / self.cfg.speed_scale).reshape(-1, 1))
        z = self.fusion(torch.cat(feats + [sp], dim=1))
        commands = torch.as_tensor([int(c) for c in commands], dtype=torch.long)
        raw = torch.stack([head(z) for head in self.heads], dim=1)
        out = raw[torch.arange(len(commands)), commands]
        return torch.stack(
            [
                torch.tanh(out[:, 0]),
                torch.sigmoid(out[:, 1]),
                torch.sigmoid(out[:, 2]),
                # unit gain: scaling this output by speed_scale would multiply the speed
                # loss gradient by the same factor and destabilise plain SGD
                F.softplus(out[:, 3]),
            ],
            dim=1,
        )
