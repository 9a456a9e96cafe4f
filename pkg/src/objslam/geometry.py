"""Core 3D types: rigid/similarity transforms, rays, oriented boxes, pinhole cameras.

All rotations are stored as unit quaternions in (x, y, z, w) order, matching
scipy. Transforms are immutable; every operation returns a new value, so the
whole module is safe to use concurrently.

Conventions: right-handed coordinates, camera looks down +z, pixel origin at
the top-left of the image. Angles are radians throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

QUAT_NORM_TOL = 1e-9
_BEHIND_EPS = 1e-12


class BehindCameraError(ValueError):
    """Raised when projecting a point at or behind the camera plane."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a


def _normalized_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("quaternion must be nonzero and finite")
    return q / n


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: rotation (unit quaternion, xyzw) followed by translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", _normalized_quat(self.quat))
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_rotvec(rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        q = Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat()
        return RigidTransform(q, translation)

    @staticmethod
    def from_matrix(rot_matrix, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        q = Rotation.from_matrix(np.asarray(rot_matrix, dtype=float)).as_quat()
        return RigidTransform(q, translation)

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=float)
        return self.rotation.apply(p) + self.translation

    def rotvec(self) -> np.ndarray:
        return self.rotation.as_rotvec()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying b first, then a."""
    ra, rb = a.rotation, b.rotation
    q = (ra * rb).as_quat()
    t = ra.apply(b.translation) + a.translation
    return RigidTransform(q, t)


def invert(t: RigidTransform) -> RigidTransform:
    rinv = t.rotation.inv()
    return RigidTransform(rinv.as_quat(), -rinv.apply(t.translation))


def relative(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a^-1 . b: pose of b expressed in a's frame."""
    return compose(invert(a), b)


def rotation_angle(t: RigidTransform) -> float:
    """Magnitude of the rotation, radians in [0, pi]."""
    return float(np.linalg.norm(t.rotation.as_rotvec()))


@dataclass(frozen=True)
class SimilarityTransform:
    """Scaled rigid transform: p -> scale * R p + t."""

    scale: float
    rigid: RigidTransform

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive and finite")

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, RigidTransform.identity())

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * self.rigid.rotation.apply(p) + self.rigid.translation


def compose_similarity(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """Similarity applying b first, then a."""
    scale = a.scale * b.scale
    rot = (a.rigid.rotation * b.rigid.rotation).as_quat()
    t = a.scale * a.rigid.rotation.apply(b.rigid.translation) + a.rigid.translation
    return SimilarityTransform(scale, RigidTransform(rot, t))


def invert_similarity(s: SimilarityTransform) -> SimilarityTransform:
    rinv = s.rigid.rotation.inv()
    t = -rinv.apply(s.rigid.translation) / s.scale
    return SimilarityTransform(1.0 / s.scale, RigidTransform(rinv.as_quat(), t))


def similarity_from_rigid(t: RigidTransform, scale: float = 1.0) -> SimilarityTransform:
    return SimilarityTransform(scale, t)


def transform_point(t, p):
    """Apply a RigidTransform or SimilarityTransform to a point or batch."""
    return t.apply(p)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        d = _as_vec3(self.direction)
        n = np.linalg.norm(d)
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("ray direction must be nonzero and finite")
        object.__setattr__(self, "direction", d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class OrientedBox3:
    """Box given by center, positive half extents, and orientation quaternion."""

    center: np.ndarray
    half_extents: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center))
        he = _as_vec3(self.half_extents)
        if not np.all(he > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "quat", _normalized_quat(self.quat))

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask for point(s) inside or on the box."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        local = self.rotation.inv().apply(p - self.center)
        return np.all(np.abs(local) <= self.half_extents, axis=-1)


# Corner ordering: index bits (i, j, k) pick the sign of (x, y, z), with bit 0
# of the index driving z. Corner 0 is (-hx, -hy, -hz), corner 7 is (+hx, +hy, +hz).
_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)


def box_corners(b: OrientedBox3) -> np.ndarray:
    """The 8 corners, shape (8, 3), in the fixed ordering above."""
    local = _CORNER_SIGNS * b.half_extents
    return b.rotation.apply(local) + b.center


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def project(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to pixels.

    Raises BehindCameraError if any point is at or behind the camera plane.
    """
    p = np.asarray(p_cam, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = p[:, 2]
    if np.any(z <= _BEHIND_EPS):
        raise BehindCameraError("point at or behind camera plane")
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = k.fx * p[:, 0] / z + k.cx
    uv[:, 1] = k.fy * p[:, 1] / z + k.cy
    return uv[0] if single else uv


def project_batch(k: CameraIntrinsics, p_cam: np.ndarray):
    """Project a batch, returning (pixels, valid_mask) instead of raising.

    Points behind the camera get a zero pixel and valid=False.
    """
    p = np.atleast_2d(np.asarray(p_cam, dtype=float))
    z = p[:, 2]
    valid = z > _BEHIND_EPS
    zsafe = np.where(valid, z, 1.0)
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = k.fx * p[:, 0] / zsafe + k.cx
    uv[:, 1] = k.fy * p[:, 1] / zsafe + k.cy
    uv[~valid] = 0.0
    return uv, valid


def back_project(k: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    """Camera-frame point for a pixel at the given depth (z = depth)."""
    u, v = float(pixel[0]), float(pixel[1])
    if depth <= 0:
        raise ValueError("depth must be positive")
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def in_image(k: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Mask of pixels inside the image bounds."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    return (
        (uv[:, 0] >= 0)
        & (uv[:, 0] < k.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < k.height)
    )


def camera_center(world_to_camera: RigidTransform) -> np.ndarray:
    """Camera position in the parent frame of a world->camera pose (-R^T t)."""
    return invert(world_to_camera).translation


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def log_se3(t: RigidTransform) -> np.ndarray:
    """6-vector (rotvec, translation) chart used for pose residuals."""
    return np.concatenate([t.rotation.as_rotvec(), t.translation])


def exp_se3(xi: np.ndarray) -> RigidTransform:
    """Inverse of log_se3 (rotation and translation treated independently)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    return RigidTransform.from_rotvec(xi[:3], xi[3:])
