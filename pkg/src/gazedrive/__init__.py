"""Gaze-attention modelling and attention-masked imitation learning at toy scale.

Submodules: :mod:`geometry` (pinhole projection), :mod:`attention` (fixation maps),
:mod:`masking`, :mod:`metrics`, :mod:`synth` (synthetic driving world),
:mod:`dataset_io` (on-disk formats), :mod:`model` (gaze network and agents) and
:mod:`cli`.
"""

from .attention import AttentionMap, GazeRecord, MapConfig, build_attention_map, frame_attention_map
from .commands import HighLevelCommand
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    PixelPoint,
    ProjectionResult,
    ProjectionStatus,
    WorldPoint,
    forward_project,
)
from .masking import MaskConfig, baseline_mask, hard_mask, soft_mask
from .metrics import ControlSignal, MetricConfig, correlation_coefficient, kl_divergence, multitask_error

__version__ = "0.1.0"
