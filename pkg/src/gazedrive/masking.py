"""Hard, soft and baseline attention masks applied to images.

Images are float arrays in [0, 1] shaped (H, W) or (H, W, C). Maps are
scaled to peak 1 before masking so attended regions keep their brightness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionMap, peak_normalize

DEFAULT_LAMBDA = 0.3


@dataclass(frozen=True)
class MaskConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {img.shape}")
    if img.ndim == 3 and img.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {img.shape[2]}")
    if not np.all((img >= 0) & (img <= 1)):
        raise ValueError("image values must lie in [0, 1]")
    return img


def _weights(img: np.ndarray, amap: AttentionMap) -> np.ndarray:
    if amap.shape != img.shape[:2]:
        raise ValueError(f"map {amap.shape} does not match image {img.shape[:2]}")
    w = peak_normalize(amap)
    return w[..., None] if img.ndim == 3 else w


def hard_mask(img, amap: AttentionMap) -> np.ndarray:
    img = check_image(img)
    return img * _weights(img, amap)


def soft_mask(img, amap: AttentionMap, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    img = check_image(img)
    w = _weights(img, amap)
    # factor <= 1 guarantees output <= input despite rounding
    factor = np.minimum(cfg.lam + (1.0 - cfg.lam) * w, 1.0)
    return img * factor


def baseline_mask(img, mean_map: AttentionMap) -> np.ndarray:
    return hard_mask(img, mean_map)


def apply_mask(mode: str, img, amap: AttentionMap, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    if mode == "hard":
        return hard_mask(img, amap)
    if mode == "soft":
        return soft_mask(img, amap, cfg)
    if mode == "baseline":
        return baseline_mask(img, amap)
    raise ValueError(f"unknown mask mode {mode!r}")
