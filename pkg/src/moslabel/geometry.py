"""Rigid transforms, point clouds, voxel sampling, and axis-aligned boxes.

These are the primitives every pipeline stage builds on. All containers are
immutable after construction (arrays are marked read-only) so they can be
shared freely across worker processes or threads. All operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateOrientationError, EmptyInputError

_ORTHO_TOL = 1e-6
_REORTHO_TRIGGER = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def orthonormalize(rotation: NDArray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) via polar decomposition."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > _ORTHO_TOL or np.linalg.det(r) < 0:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: NDArray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: NDArray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    # Accumulated products drift off SO(3); snap back before the error grows.
    if np.abs(r @ r.T - np.eye(3)).max() > _REORTHO_TRIGGER:
        r = orthonormalize(r)
    return Pose(r, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    return Pose(a.rotation.T, -(a.rotation.T @ a.translation))


def rot_z(angle: float) -> Pose:
    c, s = np.cos(angle), np.sin(angle)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))


def translate(x: float, y: float, z: float) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=np.float64))


def yaw_of(pose: Pose) -> float:
    """Heading of the pose's x-axis projected on the ground plane, in (-pi, pi]."""
    fwd = pose.rotation[:, 0]
    if abs(fwd[2]) > 0.999:
        raise DegenerateOrientationError(
            f"forward axis is near vertical (z component {fwd[2]:.4f})"
        )
    yaw = float(np.arctan2(fwd[1], fwd[0]))
    return np.pi if yaw == -np.pi else yaw


@dataclass(frozen=True)
class PointCloud:
    """Points in meters, with optional per-point intensities."""

    points: np.ndarray
    intensities: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.intensities is not None:
            inten = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"intensities length {inten.shape[0]} != point count {pts.shape[0]}"
                )
            object.__setattr__(self, "intensities", _frozen(inten))

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)))


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    return PointCloud(pose.apply(cloud.points), cloud.intensities)


def voxel_keys(points: NDArray, voxel_size: float) -> np.ndarray:
    """Integer voxel index triples via mathematical floor (N, 3) int64."""
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def _first_per_voxel(keys: np.ndarray) -> np.ndarray:
    """Indices of the first occurrence of each distinct key, in input order."""
    if keys.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    packed = np.ascontiguousarray(keys).view([("x", "i8"), ("y", "i8"), ("z", "i8")])
    _, first = np.unique(packed, return_index=True)
    return np.sort(first)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Keep the first-inserted point of every occupied voxel.

    The representative preserves its exact original coordinates, so labels can
    be propagated back by identity, and the result is deterministic for a
    fixed input order.
    """
    keep = _first_per_voxel(voxel_keys(cloud.points, voxel_size))
    inten = cloud.intensities[keep] if cloud.intensities is not None else None
    return PointCloud(cloud.points[keep], inten)


@dataclass(frozen=True)
class VoxelGrid:
    """Hashed voxel grid holding one representative point per occupied voxel."""

    voxel_size: float
    keys: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    representatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "keys", _frozen(np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)))
        object.__setattr__(self, "representatives", _frozen(np.asarray(self.representatives, dtype=np.float64).reshape(-1, 3)))

    @staticmethod
    def from_cloud(cloud: PointCloud, voxel_size: float) -> "VoxelGrid":
        keys = voxel_keys(cloud.points, voxel_size)
        keep = _first_per_voxel(keys)
        return VoxelGrid(voxel_size, keys[keep], cloud.points[keep])

    def __len__(self) -> int:
        return self.keys.shape[0]

    def key_set(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.keys))


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, inclusive on both corners."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if (lo > hi).any():
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")
        object.__setattr__(self, "min_corner", _frozen(lo))
        object.__setattr__(self, "max_corner", _frozen(hi))

    @property
    def extents(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))


def aabb_of(cloud: PointCloud, padding: float = 0.0) -> Aabb:
    if len(cloud) == 0:
        raise EmptyInputError("cannot bound an empty point cloud")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    return Aabb(cloud.points.min(axis=0) - padding, cloud.points.max(axis=0) + padding)


def point_in_box(p: NDArray, box: Aabb) -> bool:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    return bool((p >= box.min_corner).all() and (p <= box.max_corner).all())


def points_in_box(points: NDArray, box: Aabb) -> np.ndarray:
    """Vectorized membership mask for (N, 3) points."""
    pts = np.asarray(points, dtype=np.float64)
    return ((pts >= box.min_corner) & (pts <= box.max_corner)).all(axis=1)
