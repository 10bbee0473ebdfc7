"""Pinhole camera model and forward projection of world points to pixels.

Camera space is z-forward, x-right, y-down. Extrinsics map homogeneous world
coordinates into camera coordinates; intrinsics place the principal point at
the image centre (W/2, H/2).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

DEPTH_EPSILON = 1e-9
ORTHONORMAL_TOL = 1e-9


class ProjectionStatus(enum.IntEnum):
    IN_FRAME = 0
    OUT_OF_VIEW = 1
    BEHIND_CAMERA = 2


class WorldPoint(NamedTuple):
    X: float
    Y: float
    Z: float

    @classmethod
    def of(cls, p) -> "WorldPoint":
        x, y, z = (float(v) for v in p)
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
            raise ValueError(f"world point must be finite, got {(x, y, z)}")
        return cls(x, y, z)


class PixelPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class ProjectionResult:
    status: ProjectionStatus
    pixel: Optional[PixelPoint] = None

    @property
    def in_frame(self) -> bool:
        return self.status is ProjectionStatus.IN_FRAME


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal length ``f`` in pixels and the image size."""

    f: float
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.f) and self.f > 0):
            raise ValueError(f"focal length must be positive, got {self.f}")
        if int(self.width) != self.width or self.width < 1:
            raise ValueError(f"width must be a positive integer, got {self.width}")
        if int(self.height) != self.height or self.height < 1:
            raise ValueError(f"height must be a positive integer, got {self.height}")

    @property
    def principal_point(self) -> PixelPoint:
        return PixelPoint(self.width / 2, self.height / 2)

    def matrix(self) -> np.ndarray:
        """The 3x4 intrinsic matrix."""
        return np.array(
            [
                [self.f, 0.0, self.width / 2, 0.0],
                [0.0, self.f, self.height / 2, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ]
        )


class CameraExtrinsics:
    """Rigid world-to-camera transform ``c = R p + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        R = np.array(rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("extrinsics must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant must be +1")
        R.setflags(write=False)
        t.setflags(write=False)
        self.rotation = R
        self.translation = t

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_pose(cls, position, heading: float, pitch: float = 0.0) -> "CameraExtrinsics":
        """Camera at ``position`` in a z-up world, looking along ``heading`` (radians from +x).

        Positive ``pitch`` tilts the optical axis towards the ground.
        """
        ch, sh = np.cos(heading), np.sin(heading)
        forward = np.array([ch, sh, 0.0])
        right = np.array([sh, -ch, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        if pitch:
            cp, sp = np.cos(pitch), np.sin(pitch)
            forward, down = cp * forward + sp * down, cp * down - sp * forward
        R = np.stack([right, down, forward])
        t = -R @ np.asarray(position, dtype=np.float64)
        return cls(R, t)

    @property
    def position(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        """The 4x4 homogeneous extrinsic matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraExtrinsics):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"CameraExtrinsics(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def forward_project(p, ext: CameraExtrinsics, intr: CameraIntrinsics) -> ProjectionResult:
    p = WorldPoint.of(p)
    R, t = ext.rotation, ext.translation
    cx = R[0, 0] * p.X + R[0, 1] * p.Y + R[0, 2] * p.Z + t[0]
    cy = R[1, 0] * p.X + R[1, 1] * p.Y + R[1, 2] * p.Z + t[1]
    cz = R[2, 0] * p.X + R[2, 1] * p.Y + R[2, 2] * p.Z + t[2]
    if cz <= DEPTH_EPSILON:
        return ProjectionResult(ProjectionStatus.BEHIND_CAMERA)
    x = intr.f * cx / cz + intr.width / 2
    y = intr.f * cy / cz + intr.height / 2
    inside = 0 <= x < intr.width and 0 <= y < intr.height
    status = ProjectionStatus.IN_FRAME if inside else ProjectionStatus.OUT_OF_VIEW
    return ProjectionResult(status, PixelPoint(float(x), float(y)))


def project_points(points, ext: CameraExtrinsics, intr: CameraIntrinsics):
    """Vectorised :func:`forward_project`.

    Returns ``(pixels, status)`` where ``pixels`` is (N, 2) with NaN rows for
    points behind the camera and ``status`` holds :class:`ProjectionStatus` codes.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(pts)):
        raise ValueError("world points must be finite")
    cam = ext.to_camera(pts)
    depth = cam[:, 2]
    behind = depth <= DEPTH_EPSILON
    safe = np.where(behind, 1.0, depth)
    px = intr.f * cam[:, 0] / safe + intr.width / 2
    py = intr.f * cam[:, 1] / safe + intr.height / 2
    pixels = np.stack([px, py], axis=1)
    pixels[behind] = np.nan
    inside = (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height) & ~behind
    status = np.full(len(pts), int(ProjectionStatus.OUT_OF_VIEW), dtype=np.int8)
    status[inside] = int(ProjectionStatus.IN_FRAME)
    status[behind] = int(ProjectionStatus.BEHIND_CAMERA)
    return pixels, status


def compose_projection_matrix(ext: CameraExtrinsics, intr: CameraIntrinsics) -> np.ndarray:
    """Single 3x4 matrix ``M_int @ M_ext`` acting on homogeneous world points."""
    return intr.matrix() @ ext.matrix()
