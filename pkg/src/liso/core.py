"""Geometry primitives: rigid transforms, boxes and point frames.

Conventions: right-handed, z up. A box's length ``l`` lies along its heading,
its width ``w`` across, and ``z`` is the box centre (not the bottom).
Headings live in ``[-pi, pi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_heading(theta: float) -> float:
    """Wrap an angle into ``[-pi, pi)``."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"heading must be finite, got {theta}")
    if -math.pi <= theta < math.pi:
        return theta
    out = math.fmod(theta + math.pi, TWO_PI)
    if out < 0.0:
        out += TWO_PI
    out -= math.pi
    if out >= math.pi:
        out -= TWO_PI
    return out


def normalize_headings(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_heading`."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.mod(theta + np.pi, TWO_PI) - np.pi
    out = np.where(out >= np.pi, out - TWO_PI, out)
    inside = (theta >= -np.pi) & (theta < np.pi)
    return np.where(inside, theta, out)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 homogeneous rigid transform (rotation block + translation in metres)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"transform must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform has non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of a rigid transform must be (0, 0, 0, 1)")
        R = m[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation block is not orthonormal")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(4))

    @classmethod
    def from_yaw_translation(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        m = np.eye(4)
        m[:3, :3] = yaw_matrix(yaw)
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        """Rotation about z (exact for yaw-only transforms)."""
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self @ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(_clean(self.matrix @ other.matrix))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return self.compose(other)

    def inverse(self) -> RigidTransform:
        m = np.eye(4)
        R = self.rotation
        m[:3, :3] = R.T
        m[:3, 3] = -R.T @ self.translation
        return RigidTransform(m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def __eq__(self, other):
        return isinstance(other, RigidTransform) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __repr__(self):
        return f"RigidTransform(yaw={self.yaw:.4f}, t={self.translation.tolist()})"


def _clean(m: np.ndarray) -> np.ndarray:
    # products of valid transforms can pick up rounding in the last row
    m = np.array(m, dtype=np.float64)
    m[3] = (0.0, 0.0, 0.0, 1.0)
    return m


def transform_point(T: RigidTransform, p) -> np.ndarray:
    """Return ``R @ p + t``."""
    return T.apply(np.asarray(p, dtype=np.float64))


@dataclass(frozen=True)
class Box:
    """Oriented 3D box ``(x, y, z, l, w, h, heading, confidence)``."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    heading: float = 0.0
    confidence: float = 1.0

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h", "heading", "confidence"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"box field {name} is not finite: {v}")
            object.__setattr__(self, name, v)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive: {(self.l, self.w, self.h)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.heading, self.confidence])

    @classmethod
    def from_array(cls, a) -> Box:
        a = [float(v) for v in a]
        conf = a[7] if len(a) > 7 else 1.0
        return cls(a[0], a[1], a[2], a[3], a[4], a[5], a[6], conf)

    def with_center(self, center) -> Box:
        return replace(self, x=center[0], y=center[1], z=center[2])

    def transformed(self, T: RigidTransform) -> Box:
        """Box expressed in the target frame of ``T`` (yaw-only rotations)."""
        c = T.apply(self.center)
        return replace(self, x=c[0], y=c[1], z=c[2], heading=normalize_heading(self.heading + T.yaw))

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box inflated by ``margin``."""
        local = points_to_box_frame(points, self)
        half = 0.5 * self.size + margin
        return np.all(np.abs(local) <= half, axis=1)


def points_to_box_frame(points: np.ndarray, box: Box) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - box.center
    c, s = math.cos(box.heading), math.sin(box.heading)
    return np.stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]], axis=1)


def boxes_to_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 8))
    return np.stack([b.as_array() for b in boxes])


def box_corners_bev(b: Box) -> np.ndarray:
    """Four BEV corners (4, 2) in counter-clockwise order."""
    c, s = math.cos(b.heading), math.sin(b.heading)
    hl, hw = 0.5 * b.l, 0.5 * b.w
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([b.x, b.y])


@dataclass
class PointFrame:
    """One timestamped point cloud.

    ``flow`` holds per-point scene flow in metres per frame interval;
    ``pose_to_next`` is the ego pose at t+1 expressed in the ego frame at t.
    """

    timestamp_index: int
    points: np.ndarray
    flow: Optional[np.ndarray] = None
    ground_mask: Optional[np.ndarray] = None
    pose_to_next: Optional[RigidTransform] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.flow is not None:
            self.flow = np.asarray(self.flow, dtype=np.float64).reshape(-1, 3)
            if len(self.flow) != n:
                raise ValueError(f"flow has {len(self.flow)} rows for {n} points")
        if self.ground_mask is not None:
            self.ground_mask = np.asarray(self.ground_mask, dtype=bool).reshape(-1)
            if len(self.ground_mask) != n:
                raise ValueError(f"ground mask has {len(self.ground_mask)} entries for {n} points")

    def __len__(self):
        return len(self.points)

    def appearance_view(self) -> PointFrame:
        """Copy without motion channels (flow and ego pose)."""
        return PointFrame(self.timestamp_index, self.points, None, self.ground_mask, None)

    def non_ground(self) -> np.ndarray:
        if self.ground_mask is None:
            return np.ones(len(self.points), dtype=bool)
        return ~self.ground_mask


def check_sequence(frames) -> None:
    """Raise if frame indices are not strictly increasing."""
    idx = [f.timestamp_index for f in frames]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError("frame indices must be strictly increasing")


def world_poses(frames) -> list[RigidTransform]:
    """Pose of every frame in the frame-0 (world-fixed) coordinate system."""
    poses = [RigidTransform.identity()]
    for f in frames[:-1]:
        if f.pose_to_next is None:
            raise ValueError(f"frame {f.timestamp_index} has no pose_to_next")
        poses.append(poses[-1] @ f.pose_to_next)
    return poses
