"""Independent reference implementations ("oracles") and fixtures shared by the tests.

Everything here is written with explicit loops or explicit matrices so that it
does not share code paths with the package under test.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from gazedrive.attention import AttentionMap
from gazedrive.geometry import CameraExtrinsics, CameraIntrinsics


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_extrinsics(rng: np.random.Generator, scale: float = 5.0) -> CameraExtrinsics:
    return CameraExtrinsics(random_rotation(rng), rng.uniform(-scale, scale, 3))


def oracle_project(p, rotation, translation, f, W, H):
    """Explicit M_int (3x4) @ M_ext (4x4) @ [X, Y, Z, 1], then homogeneous division.

    Returns ``(x, y, depth)``.
    """
    m_int = [[f, 0.0, W / 2.0, 0.0], [0.0, f, H / 2.0, 0.0], [0.0, 0.0, 1.0, 0.0]]
    m_ext = [[0.0] * 4 for _ in range(4)]
    for i in range(3):
        for j in range(3):
            m_ext[i][j] = float(rotation[i][j])
        m_ext[i][3] = float(translation[i])
    m_ext[3][3] = 1.0
    hom = [float(p[0]), float(p[1]), float(p[2]), 1.0]
    cam = [sum(m_ext[i][k] * hom[k] for k in range(4)) for i in range(4)]
    pix = [sum(m_int[i][k] * cam[k] for k in range(4)) for i in range(3)]
    return pix[0] / pix[2], pix[1] / pix[2], cam[2]


def oracle_field(pixels, W, H, sigma, truncate=4.0):
    """Per-cell loop: max over unit-peak Gaussians, zero beyond truncate*sigma."""
    field = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            best = 0.0
            for x, y in pixels:
                d2 = (c - x) ** 2 + (r - y) ** 2
                if d2 <= (truncate * sigma) ** 2:
                    best = max(best, math.exp(-d2 / (2 * sigma * sigma)))
            field[r, c] = best
    return field


def oracle_kl(truth, pred, eps):
    total = 0.0
    for y, yh in zip(np.ravel(truth), np.ravel(pred)):
        total += y * math.log(eps + y / (eps + yh))
    return total


def oracle_cc(a, b):
    """Two-pass Pearson correlation."""
    a, b = list(np.ravel(a)), list(np.ravel(b))
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / math.sqrt(saa * sbb)


def oracle_multitask(preds, targets, weights, mode):
    errs = []
    for k in range(4):
        acc = 0.0
        for p, t in zip(preds, targets):
            d = p[k] - t[k]
            acc += d * d if mode == "mse" else abs(d)
        errs.append(acc / len(preds))
    return sum(w * e for w, e in zip(weights, errs)) / sum(weights)


def oracle_mask(img, values, lam=None):
    """Per-pixel loop: hard (lam None) or soft masking with a peak-normalised map."""
    img = np.asarray(img, dtype=np.float64)
    out = np.zeros_like(img)
    peak = max(np.ravel(values))
    H, W = values.shape
    for r in range(H):
        for c in range(W):
            w = values[r, c] / peak
            factor = w if lam is None else lam + (1 - lam) * w
            out[r, c] = img[r, c] * factor
    return out


def random_map(rng: np.random.Generator, W: int, H: int) -> AttentionMap:
    v = rng.random((H, W)) ** 3
    return AttentionMap(v / v.sum())


def read_amap_reference(data: bytes):
    """Independent AMAP reader using only int.from_bytes and struct float decoding."""
    assert data[0:4] == b"AMAP"
    W = int.from_bytes(data[4:8], "little")
    H = int.from_bytes(data[8:12], "little")
    empty = data[12]
    vals = [struct.unpack("<f", data[13 + 4 * i : 17 + 4 * i])[0] for i in range(W * H)]
    return W, H, empty, np.array(vals).reshape(H, W)


def disc_coverage_oracle(cx, cy, radius, W, H):
    """Pixel centres (x=c, y=r) inside the circle of the given centre and radius."""
    mask = np.zeros((H, W), dtype=bool)
    for r in range(H):
        for c in range(W):
            mask[r, c] = (c - cx) ** 2 + (r - cy) ** 2 <= radius * radius
    return mask


def default_intrinsics(W=64, H=64, f=32.0) -> CameraIntrinsics:
    return CameraIntrinsics(f, W, H)
