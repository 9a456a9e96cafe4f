"""Monocular scale recovery and SLAM-to-world alignment via a chessboard target.

solve_pnp estimates the board->camera pose from 2D-3D correspondences
(homography initialization for planar targets, DLT otherwise, then
Gauss-Newton refinement of the reprojection error). Two calibrated frames give
the metric scale as a ratio of camera-center distances; one frame then anchors
the similarity transform from the SLAM frame to the world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    SimilarityTransform,
    camera_center,
    compose,
    compose_similarity,
    invert,
    project_batch,
    similarity_from_rigid,
)

_MIN_POINTS = 6
_MIN_BASELINE = 1e-6


class DegenerateBaselineError(ValueError):
    """SLAM-frame camera centers too close for a usable scale ratio."""


@dataclass(frozen=True)
class ChessboardSpec:
    inner_rows: int
    inner_cols: int
    square_size: float
    world_pose: RigidTransform  # board frame -> world

    def __post_init__(self):
        if self.inner_rows < 2 or self.inner_cols < 2:
            raise ValueError("board needs at least 2x2 inner corners")
        if self.square_size <= 0:
            raise ValueError("square size must be positive")

    def grid_points(self) -> np.ndarray:
        """Inner corner coordinates in the board frame (z = 0 plane)."""
        jj, ii = np.meshgrid(
            np.arange(self.inner_cols), np.arange(self.inner_rows)
        )
        pts = np.stack(
            [jj.ravel() * self.square_size, ii.ravel() * self.square_size,
             np.zeros(self.inner_rows * self.inner_cols)],
            axis=1,
        )
        return pts


@dataclass(frozen=True)
class CalibrationFramePair:
    """Two frames seen both by the board solver and by SLAM.

    p1_board/p2_board: camera pose in the board frame (board <- camera is the
    inverse of the PnP output). p1_slam/p2_slam: camera pose in the SLAM frame.
    """

    p1_board: RigidTransform
    p2_board: RigidTransform
    p1_slam: RigidTransform
    p2_slam: RigidTransform


def _reprojection_rms(object_points, image_points, k, board_to_cam):
    p_cam = board_to_cam.apply(object_points)
    uv, valid = project_batch(k, p_cam)
    if not np.all(valid):
        return np.inf
    return float(np.sqrt(np.mean(np.sum((uv - image_points) ** 2, axis=1))))


def _homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT homography mapping src (N,2) to dst (N,2)."""

    def normalize(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * mean[0]],
                      [0, scale, -scale * mean[1]],
                      [0, 0, 1]])
        ph = np.column_stack([pts, np.ones(len(pts))]) @ t.T
        return ph, t

    sh, ts = normalize(src)
    dh, td = normalize(dst)
    a = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        a.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        a.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(a))
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(td) @ h @ ts


def _pose_from_homography(h: np.ndarray, k: CameraIntrinsics) -> RigidTransform:
    """Decompose K^-1 H = [r1 r2 t] (up to scale) into a rigid pose."""
    m = np.linalg.inv(k.matrix()) @ h
    scale = np.mean([np.linalg.norm(m[:, 0]), np.linalg.norm(m[:, 1])])
    if scale <= 0:
        raise ValueError("degenerate homography")
    m = m / scale
    if m[2, 2] < 0:  # keep the board in front of the camera
        m = -m
    r1, r2, t = m[:, 0], m[:, 1], m[:, 2]
    r3 = np.cross(r1, r2)
    rot = np.column_stack([r1, r2, r3])
    u, _, vt = np.linalg.svd(rot)
    rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    return RigidTransform.from_matrix(rot, t)


def _pose_from_dlt(object_points, image_points, k):
    """Full 3x4 DLT for non-planar point sets."""
    a = []
    for (x, y, z), (u, v) in zip(object_points, image_points):
        a.append([x, y, z, 1, 0, 0, 0, 0, -u * x, -u * y, -u * z, -u])
        a.append([0, 0, 0, 0, x, y, z, 1, -v * x, -v * y, -v * z, -v])
    _, _, vt = np.linalg.svd(np.asarray(a))
    p = vt[-1].reshape(3, 4)
    m = np.linalg.inv(k.matrix()) @ p
    scale = np.cbrt(np.linalg.det(m[:, :3]))
    if scale == 0 or not np.isfinite(scale):
        raise ValueError("degenerate DLT configuration")
    m = m / scale
    rot = m[:, :3]
    u, _, vt2 = np.linalg.svd(rot)
    rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt2)]) @ vt2
    return RigidTransform.from_matrix(rot, m[:, 3])


def _refine_pose(object_points, image_points, k, pose, iterations=30):
    """Gauss-Newton on the reprojection error over (rotvec, translation)."""
    rvec = pose.rotvec()
    t = pose.translation.copy()

    def residuals(rv, tv):
        p_cam = Rotation.from_rotvec(rv).apply(object_points) + tv
        z = np.maximum(p_cam[:, 2], 1e-9)
        uv = np.column_stack(
            [k.fx * p_cam[:, 0] / z + k.cx, k.fy * p_cam[:, 1] / z + k.cy]
        )
        return (uv - image_points).ravel()

    damping = 1e-6
    r = residuals(rvec, t)
    cost = float(r @ r)
    for _ in range(iterations):
        jac = np.empty((len(r), 6))
        h = 1e-7
        for j in range(6):
            d = np.zeros(6)
            d[j] = h
            rp = residuals(rvec + d[:3], t + d[3:])
            rm = residuals(rvec - d[:3], t - d[3:])
            jac[:, j] = (rp - rm) / (2.0 * h)
        grad = jac.T @ r
        if np.linalg.norm(grad) < 1e-12:
            break
        hmat = jac.T @ jac
        step = np.linalg.solve(hmat + damping * np.eye(6), -grad)
        new_rvec, new_t = rvec + step[:3], t + step[3:]
        new_r = residuals(new_rvec, new_t)
        new_cost = float(new_r @ new_r)
        if new_cost < cost:
            rvec, t, r, cost = new_rvec, new_t, new_r, new_cost
            damping = max(damping * 0.5, 1e-12)
            if abs(cost) < 1e-24:
                break
        else:
            damping *= 10.0
    return RigidTransform.from_rotvec(rvec, t)


def solve_pnp(object_points, image_points, k: CameraIntrinsics):
    """Board->camera pose from 2D-3D correspondences, plus reprojection RMS (px)."""
    obj = np.atleast_2d(np.asarray(object_points, dtype=float))
    img = np.atleast_2d(np.asarray(image_points, dtype=float))
    if obj.shape[0] != img.shape[0]:
        raise ValueError("point count mismatch")
    if obj.shape[0] < _MIN_POINTS:
        raise ValueError(f"need at least {_MIN_POINTS} correspondences")
    centered = obj - obj.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-9 * max(svals[0], 1.0):
        raise ValueError("degenerate configuration: points are collinear")

    planar = svals[2] < 1e-6 * max(svals[0], 1.0)
    if planar:
        # Map the (possibly tilted) plane to z = 0 before the homography.
        _, _, vt = np.linalg.svd(centered)
        basis = vt[:2].T
        plane_2d = centered @ basis
        h = _homography_dlt(plane_2d, img)
        pose_plane = _pose_from_homography(h, k)
        # pose_plane maps plane coords -> camera; recover board -> camera.
        rot_plane = pose_plane.rotation.as_matrix()
        rot3 = np.cross(basis[:, 0], basis[:, 1])
        board_rot = rot_plane[:, :2] @ basis.T + np.outer(rot_plane[:, 2], rot3)
        u, _, vt2 = np.linalg.svd(board_rot)
        board_rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt2)]) @ vt2
        t = pose_plane.translation - board_rot @ obj.mean(axis=0)
        init = RigidTransform.from_matrix(board_rot, t)
    else:
        init = _pose_from_dlt(obj, img, k)

    init_rms = _reprojection_rms(obj, img, k, init)
    refined = _refine_pose(obj, img, k, init)
    rms = _reprojection_rms(obj, img, k, refined)
    if rms > init_rms:
        refined, rms = init, init_rms
    return refined, rms


def estimate_scale(pair: CalibrationFramePair) -> float:
    """Metric scale: ratio of board-frame to SLAM-frame camera-center distances.

    Camera centers are extracted explicitly (for a world->camera pose the
    center is -R^T t); the pair stores camera-in-frame poses, whose translation
    already is the center.
    """
    c1b = pair.p1_board.translation
    c2b = pair.p2_board.translation
    c1s = pair.p1_slam.translation
    c2s = pair.p2_slam.translation
    slam_dist = float(np.linalg.norm(c1s - c2s))
    if slam_dist < _MIN_BASELINE:
        raise DegenerateBaselineError("degenerate baseline in SLAM frame")
    return float(np.linalg.norm(c1b - c2b)) / slam_dist


def align_frames(pair: CalibrationFramePair, board: ChessboardSpec,
                 scale: float) -> SimilarityTransform:
    """Similarity mapping SLAM coordinates to world coordinates.

    world <- board <- camera(frame 1), with the scale applied to the
    camera <- SLAM leg so SLAM units become meters.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    world_from_board = similarity_from_rigid(board.world_pose)
    board_from_cam = similarity_from_rigid(pair.p1_board)
    scale_only = SimilarityTransform(scale, RigidTransform.identity())
    cam_from_slam = similarity_from_rigid(invert(pair.p1_slam))
    return compose_similarity(
        world_from_board,
        compose_similarity(board_from_cam,
                           compose_similarity(scale_only, cam_from_slam)),
    )


def camera_pose_pair_from_world(world_to_cam1: RigidTransform,
                                world_to_cam2: RigidTransform,
                                board: ChessboardSpec,
                                slam_from_world: SimilarityTransform,
                                ) -> CalibrationFramePair:
    """Build the frame pair for cameras known in the world and a SLAM map frame.

    Helper for the synthetic pipeline: the board-frame camera poses follow from
    the board's world pose; the SLAM-frame poses apply the (scaled) map frame.
    """
    board_from_world = invert(board.world_pose)
    p1_board = compose(board_from_world, invert(world_to_cam1))
    p2_board = compose(board_from_world, invert(world_to_cam2))

    def slam_cam(world_to_cam):
        center = camera_center(world_to_cam)
        c_slam = slam_from_world.apply(center)
        rot = (slam_from_world.rigid.rotation * invert(world_to_cam).rotation)
        return RigidTransform(rot.as_quat(), c_slam)

    return CalibrationFramePair(
        p1_board=p1_board,
        p2_board=p2_board,
        p1_slam=slam_cam(world_to_cam1),
        p2_slam=slam_cam(world_to_cam2),
    )
