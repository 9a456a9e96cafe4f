"""Synthetic scene, ring-loop trajectory, and motion-blur degradation model.

No pixels are rendered anywhere: blur acts on the feature stream. One scalar
blur extent b (pixels) drives three degradations: feature yield decays
exponentially, pixel noise grows linearly, and odometry noise grows linearly
(consumed by the SLAM frontend simulation). A deblur operator removes a fixed
fraction of the blur extent before those effects apply.

Everything is deterministic given the master seed; per-frame randomness is
derived from (seed, frame index) so paired blurred/deblurred runs share scenes,
feature draws, and noise directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    in_image,
    invert,
    project_batch,
)
from .sdf_shapes import ShapeCode, extract_mesh_points


@dataclass(frozen=True)
class SceneSpec:
    object_code: ShapeCode
    object_pose: RigidTransform  # world -> object
    object_point_count: int = 1000
    background_point_count: int = 1500
    background_extent: float = 12.0  # half width of the background cube, meters
    seed: int = 0


@dataclass(frozen=True)
class Scene:
    points: np.ndarray  # (N, 3) world coordinates, object points first
    object_point_ids: np.ndarray  # indices into points

    @property
    def object_points(self) -> np.ndarray:
        return self.points[self.object_point_ids]


@dataclass(frozen=True)
class TrajectorySpec:
    semi_axis_x: float = 4.0
    semi_axis_y: float = 2.5
    height: float = 1.5
    duration: float = 180.0
    frame_rate: float = 15.0
    # Angular speed omega(t) = base * (1 + modulation * sin(2 pi cycles t / duration));
    # base defaults to one full loop over the duration.
    speed_modulation: float = 0.0
    speed_cycles: int = 3
    start_angle: float = 0.0

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.frame_rate))

    @property
    def base_speed(self) -> float:
        return 2.0 * math.pi / self.duration


@dataclass(frozen=True)
class CameraFrame:
    index: int
    timestamp: float
    pose: RigidTransform  # world -> camera
    angular_speed: float


@dataclass(frozen=True)
class BlurModel:
    exposure: float = 0.03  # seconds
    blur_gain: float = 500.0  # pixels per (rad/s)
    base_feature_count: int = 200
    yield_decay: float = 3.0  # pixels of blur per e-fold of feature loss
    noise_floor: float = 0.3  # pixel noise floor
    noise_gain: float = 0.4  # extra noise per blur pixel

    def __post_init__(self):
        vals = (self.exposure, self.blur_gain, self.base_feature_count,
                self.yield_decay, self.noise_floor, self.noise_gain)
        if any(v <= 0 for v in vals):
            raise ValueError("all blur model parameters must be positive")


@dataclass(frozen=True)
class DeblurOperator:
    """Parametric restoration: removes `efficiency` of the blur extent."""

    efficiency: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("deblur efficiency must lie in [0, 1]")


@dataclass(frozen=True)
class SimulatedFrame:
    index: int
    timestamp: float
    pose: RigidTransform  # ground-truth world -> camera
    feature_ids: np.ndarray  # scene point indices
    feature_pixels: np.ndarray  # (N, 2) noisy pixel coordinates
    blur_level: float  # effective blur b', pixels

    @property
    def feature_count(self) -> int:
        return len(self.feature_ids)


def frame_rng(master_seed: int, frame_index: int) -> np.random.Generator:
    """Per-frame generator, independent of deblur settings."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(frame_index,))
    )


def stage_rng(master_seed: int, stage: str) -> np.random.Generator:
    """Per-stage generator derived from the master seed and the stage name."""
    digest = [ord(c) for c in stage]
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(digest))
    )


def generate_scene(spec: SceneSpec) -> Scene:
    """Object surface samples plus uniform background points, seeded."""
    rng = stage_rng(spec.seed, "scene")
    surface = extract_mesh_points(spec.object_code, 64)
    idx = rng.choice(len(surface), size=spec.object_point_count,
                     replace=spec.object_point_count > len(surface))
    obj_world = invert(spec.object_pose).apply(surface[idx])
    bg = rng.uniform(-spec.background_extent, spec.background_extent,
                     size=(spec.background_point_count, 3))
    points = np.vstack([obj_world, bg])
    return Scene(points=points, object_point_ids=np.arange(spec.object_point_count))


def look_at_pose(camera_position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World->camera pose for a camera at `camera_position` looking at `target`."""
    c = np.asarray(camera_position, dtype=float)
    fwd = np.asarray(target, dtype=float) - c
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=float)
    right = np.cross(fwd, upv)
    n = np.linalg.norm(right)
    if n < 1e-9:  # looking straight along up; pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(right)
    right = right / n
    down = np.cross(fwd, right)
    # Camera axes in world coordinates: x right, y down, z forward.
    rot_cw = np.column_stack([right, down, fwd])
    rot_wc = rot_cw.T
    return RigidTransform.from_matrix(rot_wc, -rot_wc @ c)


def generate_trajectory(spec: TrajectorySpec, target=(0.0, 0.0, 0.0)):
    """Ring loop around the target with a modulated angular speed profile."""
    n = spec.frame_count
    dt = 1.0 / spec.frame_rate
    frames = []
    theta = spec.start_angle
    for i in range(n):
        t = i * dt
        omega = spec.base_speed * (
            1.0 + spec.speed_modulation
            * math.sin(2.0 * math.pi * spec.speed_cycles * t / spec.duration)
        )
        pos = np.array([
            spec.semi_axis_x * math.cos(theta),
            spec.semi_axis_y * math.sin(theta),
            spec.height,
        ]) + np.asarray(target, dtype=float)
        pose = look_at_pose(pos, target)
        frames.append(CameraFrame(index=i, timestamp=t, pose=pose,
                                  angular_speed=omega))
        theta += omega * dt
    return frames


def blur_extent(model: BlurModel, angular_speed: float) -> float:
    """Blur extent in pixels: gain * angular speed * exposure."""
    if angular_speed < 0:
        raise ValueError("angular speed must be non-negative")
    return model.blur_gain * angular_speed * model.exposure


def effective_blur(model: BlurModel, angular_speed: float,
                   deblur: DeblurOperator | None) -> float:
    b = blur_extent(model, angular_speed)
    return b * (1.0 - deblur.efficiency) if deblur is not None else b


def simulate_frame(
    scene: Scene,
    frame: CameraFrame,
    intrinsics: CameraIntrinsics,
    model: BlurModel,
    deblur: DeblurOperator | None,
    master_seed: int,
) -> SimulatedFrame:
    """Synthesize the feature stream for one frame.

    The drawn feature subset is nested in blur: the same seeded permutation is
    consumed for any blur level, so deblurred frames always contain at least
    the features of the blurred frame of the same seed.
    """
    b_eff = effective_blur(model, frame.angular_speed, deblur)
    p_cam = frame.pose.apply(scene.points)
    uv, in_front = project_batch(intrinsics, p_cam)
    visible = in_front & in_image(intrinsics, uv)
    vis_idx = np.flatnonzero(visible)

    rng = frame_rng(master_seed, frame.index)
    perm = rng.permutation(len(vis_idx))
    noise_dirs = rng.standard_normal((len(vis_idx), 2))

    n_target = int(round(model.base_feature_count
                         * math.exp(-b_eff / model.yield_decay)))
    n = min(n_target, len(vis_idx))
    chosen = perm[:n]
    sigma = model.noise_floor + model.noise_gain * b_eff
    pixels = uv[vis_idx[chosen]] + sigma * noise_dirs[chosen]
    return SimulatedFrame(
        index=frame.index,
        timestamp=frame.timestamp,
        pose=frame.pose,
        feature_ids=vis_idx[chosen],
        feature_pixels=pixels,
        blur_level=b_eff,
    )


def simulate_frames(scene, frames, intrinsics, model, deblur, master_seed):
    return [
        simulate_frame(scene, f, intrinsics, model, deblur, master_seed)
        for f in frames
    ]
