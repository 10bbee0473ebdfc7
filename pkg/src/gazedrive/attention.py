"""Fixation maps built from windows of projected 3D gaze points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .geometry import CameraExtrinsics, CameraIntrinsics, WorldPoint, project_points, ProjectionStatus

SUM_TOL = 1e-6


class AttentionMap:
    """Probability distribution over the pixels of a ``height x width`` image.

    ``values`` is indexed ``[row, col]``. An empty map (no fixation landed in
    the frame) is all zeros with ``empty`` set.
    """

    __slots__ = ("values", "empty")

    def __init__(self, values, empty: bool = False):
        v = np.array(values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"attention map must be a non-empty 2-D grid, got shape {v.shape}")
        if empty:
            if np.any(v != 0):
                raise ValueError("empty attention map must be all zeros")
        else:
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError("attention map values must be finite and non-negative")
            total = v.sum()
            if abs(total - 1.0) > SUM_TOL:
                raise ValueError(f"attention map must sum to 1, sums to {total}")
        v.setflags(write=False)
        self.values = v
        self.empty = bool(empty)

    @classmethod
    def empty_like(cls, width: int, height: int) -> "AttentionMap":
        return cls(np.zeros((height, width)), empty=True)

    @classmethod
    def from_field(cls, field) -> "AttentionMap":
        """Normalise a non-negative field to sum 1 (empty if it is all zero)."""
        field = np.asarray(field, dtype=np.float64)
        total = field.sum()
        if total <= 0:
            return cls(np.zeros_like(field), empty=True)
        return cls(field / total)

    @classmethod
    def uniform(cls, width: int, height: int) -> "AttentionMap":
        return cls(np.full((height, width), 1.0 / (width * height)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, AttentionMap):
            return NotImplemented
        return self.empty == other.empty and np.array_equal(self.values, other.values)

    def __repr__(self):
        tag = ", empty" if self.empty else ""
        return f"AttentionMap({self.width}x{self.height}{tag})"


class GazeRecord(NamedTuple):
    frame_index: int
    point: WorldPoint
    valid: bool = True


@dataclass(frozen=True)
class MapConfig:
    # None means width / 20, resolved per image
    sigma: Optional[float] = None
    half_window: int = 12
    truncate: float = 4.0

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.half_window < 0:
            raise ValueError(f"half_window must be >= 0, got {self.half_window}")
        if not self.truncate > 0:
            raise ValueError("truncate must be positive")

    def sigma_for(self, width: int) -> float:
        return self.sigma if self.sigma is not None else width / 20.0


def pixel_index(v: float, size: int) -> int:
    """Grid cell nearest to continuous coordinate ``v``; ties go to the lower cell."""
    return min(max(math.ceil(v - 0.5), 0), size - 1)


def window_fixations(gaze: Sequence[GazeRecord], t: int, cfg: MapConfig = MapConfig()) -> list:
    """Valid gaze points for frames ``t - half_window .. t + half_window``, truncated at the ends."""
    gaze = getattr(gaze, "gaze", gaze)
    n = len(gaze)
    if not 0 <= t < n:
        raise IndexError(f"frame {t} out of range for {n} frames")
    lo, hi = max(0, t - cfg.half_window), min(n - 1, t + cfg.half_window)
    return [gaze[i].point for i in range(lo, hi + 1) if gaze[i].valid]


def fixation_field(pixels, width: int, height: int, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Pointwise max of unit-peak isotropic Gaussians centred on ``pixels``.

    Grid cell ``[r, c]`` samples continuous coordinate ``(x=c, y=r)``. Each
    Gaussian is zero beyond ``truncate * sigma`` from its centre.
    """
    field = np.zeros((height, width))
    radius = truncate * sigma
    r2max = radius * radius
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in np.asarray(pixels, dtype=np.float64).reshape(-1, 2):
        c0, c1 = max(0, math.ceil(x - radius)), min(width - 1, math.floor(x + radius))
        r0, r1 = max(0, math.ceil(y - radius)), min(height - 1, math.floor(y + radius))
        if c0 > c1 or r0 > r1:
            continue
        dx2 = (np.arange(c0, c1 + 1) - x) ** 2
        dy2 = (np.arange(r0, r1 + 1) - y) ** 2
        d2 = dy2[:, None] + dx2[None, :]
        g = np.where(d2 <= r2max, np.exp(-d2 * inv), 0.0)
        np.maximum(field[r0 : r1 + 1, c0 : c1 + 1], g, out=field[r0 : r1 + 1, c0 : c1 + 1])
    return field


def in_frame_pixels(fixations, frame_ext: CameraExtrinsics, intr: CameraIntrinsics) -> np.ndarray:
    if len(fixations) == 0:
        return np.zeros((0, 2))
    pixels, status = project_points(np.asarray(fixations, dtype=np.float64), frame_ext, intr)
    return pixels[status == ProjectionStatus.IN_FRAME]


def build_attention_map(
    fixations: Iterable,
    frame_ext: CameraExtrinsics,
    intr: CameraIntrinsics,
    cfg: MapConfig = MapConfig(),
) -> AttentionMap:
    """Project fixations with the current frame's extrinsics and max-fuse their Gaussians."""
    pixels = in_frame_pixels(list(fixations), frame_ext, intr)
    if len(pixels) == 0:
        return AttentionMap.empty_like(intr.width, intr.height)
    field = fixation_field(pixels, intr.width, intr.height, cfg.sigma_for(intr.width), cfg.truncate)
    return AttentionMap.from_field(field)


def frame_attention_map(episode, t: int, cfg: MapConfig = MapConfig()) -> AttentionMap:
    """Ground-truth map for frame ``t`` of an episode."""
    fixations = window_fixations(episode.gaze, t, cfg)
    return build_attention_map(fixations, episode.extrinsics[t], episode.intrinsics, cfg)


def mean_fixation_map(maps: Sequence[AttentionMap]) -> AttentionMap:
    """Average of the non-empty maps, renormalised."""
    maps = list(maps)
    if not maps:
        raise ValueError("no maps given")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("attention maps differ in size")
    full = [m for m in maps if not m.empty]
    if not full:
        raise ValueError("all attention maps are empty")
    acc = np.zeros(shape)
    for m in full:
        acc += m.values
    return AttentionMap.from_field(acc / len(full))


def peak_normalize(amap: AttentionMap) -> np.ndarray:
    """Scale a map so its maximum is 1."""
    if amap.empty:
        raise ValueError("cannot peak-normalise an empty attention map")
    return amap.values / amap.values.max()
