"""End-to-end batch pipeline: simulate, track/map, calibrate, reconstruct, evaluate.

The frontend consumes the simulated (or ingested) feature stream and builds the
factor graph with drift: odometry noise, map-point noise, and feature loss all
scale with the per-frame blur level. The map is handed over in a scaled SLAM
frame; the chessboard calibration stage recovers the metric scale and the
SLAM-to-world similarity before reconstruction and evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blur_sim, calibration, metrics, reconstruction, slam_graph
from .blur_sim import Scene, SimulatedFrame, frame_rng, stage_rng
from .config import RunConfig, default_board
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    SimilarityTransform,
    back_project,
    box_corners,
    camera_center,
    compose,
    compose_similarity,
    invert,
    invert_similarity,
    project_batch,
    similarity_from_rigid,
)
from .reconstruction import ObjectHypothesis, RenderObservation
from .sdf_shapes import CODE_HIGH, CODE_LOW, ShapeCode, tight_bounding_box
from .slam_graph import FactorGraph, Keyframe, TriggerPolicy

OBJECT_ID = 0


class PipelineError(RuntimeError):
    pass


@dataclass
class FrontendResult:
    graph: FactorGraph
    association_log: list  # (keyframe_id, [newly associated point ids])
    lost_intervals: list  # (first_frame_index, last_frame_index)
    keyframe_truth: dict  # keyframe id -> ground-truth world->camera pose
    mask_rects: dict  # keyframe id -> (umin, vmin, umax, vmax)
    first_seen_keyframe: int | None


def mask_rect_for_pose(scene_box, intrinsics: CameraIntrinsics,
                       true_pose: RigidTransform, inflation: float):
    """2D bounding rect of the projected ground-truth object box, inflated.

    Stands in for the 2D segmentation mask (no detector in scope). Returns
    None when the object is not in front of the camera.
    """
    corners = box_corners(scene_box)
    p_cam = true_pose.apply(corners)
    uv, valid = project_batch(intrinsics, p_cam)
    if not np.all(valid):
        return None
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    pad = inflation * (hi - lo)
    return (lo[0] - pad[0], lo[1] - pad[1], hi[0] + pad[0], hi[1] + pad[1])


def run_frontend(config: RunConfig, scene: Scene,
                 frames: list[SimulatedFrame]) -> FrontendResult:
    """Track the frame stream and build the factor graph.

    Keyframes are taken every `keyframe_stride` tracked frames. The estimated
    camera pose integrates frame-to-frame relative motion corrupted by noise
    scaled with (1 + blur); map points are created on their second keyframe
    observation with position noise scaled the same way.
    """
    cfg = config.slam
    rng = stage_rng(config.seed, "frontend")
    graph = FactorGraph(intrinsics=config.intrinsics)
    gt_box = tight_bounding_box(config.scene.object_code, config.scene.object_pose)
    object_ids = set(int(i) for i in scene.object_point_ids)

    est_pose = None
    prev_true = None
    lost_intervals = []
    lost_open = None
    tracked_count = 0
    association_log = []
    keyframe_truth = {}
    mask_rects = {}
    first_seen = None
    seen_in_keyframes: dict[int, int] = {}
    obs_backlog: dict[int, list] = {}

    for frame in frames:
        status = slam_graph.simulate_tracking(
            graph, frame.feature_ids, cfg.tracking_threshold
        )
        if status == "lost":
            if lost_open is None:
                lost_open = frame.index
            prev_true = None  # relocalization abstracted: re-anchor on recovery
            continue
        if lost_open is not None:
            lost_intervals.append((lost_open, frame.index - 1))
            lost_open = None

        if est_pose is None:
            est_pose = frame.pose  # gauge: first tracked frame at ground truth
        elif prev_true is None:
            # Recovery after a lost interval: re-anchor at the drifted estimate
            # using the true relative motion from the last tracked frame.
            est_pose = frame.pose if not graph.keyframes else compose(
                est_pose, slam_graph.relative(last_tracked_true, frame.pose)
            )
        else:
            rel = slam_graph.relative(prev_true, frame.pose)
            noise_scale = 1.0 + frame.blur_level
            drot = rng.normal(0.0, cfg.odometry_rotation_sigma * noise_scale, 3)
            dt = rng.normal(0.0, cfg.odometry_translation_sigma * noise_scale, 3)
            noisy_rel = compose(rel, RigidTransform.from_rotvec(drot, dt))
            est_pose = compose(est_pose, noisy_rel)
        prev_true = frame.pose
        last_tracked_true = frame.pose

        if tracked_count % cfg.keyframe_stride != 0:
            tracked_count += 1
            continue
        tracked_count += 1

        kf_id = frame.index
        # Map-point creation: second keyframe observation instantiates the point.
        observations = []
        for fid, pixel in zip(frame.feature_ids, frame.feature_pixels):
            fid = int(fid)
            seen_in_keyframes[fid] = seen_in_keyframes.get(fid, 0) + 1
            if fid in graph.map_points:
                observations.append((fid, np.asarray(pixel, dtype=float)))
            elif seen_in_keyframes[fid] == 2:
                noise = rng.normal(
                    0.0, cfg.map_point_sigma * (1.0 + frame.blur_level), 3
                )
                slam_graph.add_map_point(graph, fid, scene.points[fid] + noise)
                observations.append((fid, np.asarray(pixel, dtype=float)))
        if len(observations) > cfg.max_observations_per_keyframe:
            keep = rng.choice(len(observations),
                              cfg.max_observations_per_keyframe, replace=False)
            observations = [observations[i] for i in sorted(keep)]

        blur_weight = 1.0 / (1.0 + frame.blur_level) ** 2
        kf = Keyframe(id=kf_id, pose=est_pose, timestamp=frame.timestamp,
                      observations=observations, blur_level=frame.blur_level)
        slam_graph.add_keyframe(graph, kf, odometry_weight=blur_weight)
        keyframe_truth[kf_id] = frame.pose

        rect = mask_rect_for_pose(gt_box, config.intrinsics, frame.pose,
                                  cfg.mask_inflation)
        if rect is not None:
            mask_rects[kf_id] = rect

        if first_seen is None and any(int(i) in object_ids for i in frame.feature_ids):
            first_seen = kf_id
            hyp = ObjectHypothesis(pose=RigidTransform.identity(),
                                   code=ShapeCode.centered(), status="pending")
            slam_graph.add_object(graph, OBJECT_ID, hyp, first_seen)

        if first_seen is not None and rect is not None:
            umin, vmin, umax, vmax = rect
            # Depth gate: the projected-box mask also covers background in 2D,
            # so candidates must fall inside the inflated 3D box as well.
            from .geometry import OrientedBox3

            gate_box = OrientedBox3(gt_box.center,
                                    1.3 * gt_box.half_extents, gt_box.quat)

            def predicate(uv):
                return umin <= uv[0] <= umax and vmin <= uv[1] <= vmax

            before = set(graph.objects[OBJECT_ID].hypothesis.associated_point_ids)
            slam_graph.associate_points(
                graph, OBJECT_ID, predicate,
                position_filter=lambda p: bool(gate_box.contains(p)[0]),
            )
            newly = sorted(
                graph.objects[OBJECT_ID].hypothesis.associated_point_ids - before
            )
            if newly:
                association_log.append((kf_id, newly))

    if lost_open is not None:
        lost_intervals.append((lost_open, frames[-1].index))
    return FrontendResult(
        graph=graph,
        association_log=association_log,
        lost_intervals=lost_intervals,
        keyframe_truth=keyframe_truth,
        mask_rects=mask_rects,
        first_seen_keyframe=first_seen,
    )


def apply_similarity_to_camera(s: SimilarityTransform,
                               world_to_cam: RigidTransform) -> RigidTransform:
    """Re-express a world->camera pose after mapping the world by s."""
    center = camera_center(world_to_cam)
    new_center = s.apply(center)
    rot_world_cam = invert(world_to_cam).rotation
    new_rot_world_cam = s.rigid.rotation * rot_world_cam
    cam_in_world = RigidTransform(new_rot_world_cam.as_quat(), new_center)
    return invert(cam_in_world)


def slam_frame_similarity(config: RunConfig) -> SimilarityTransform:
    """Ground-truth map frame: the monocular map is the world under this similarity."""
    rigid = RigidTransform.from_rotvec([0.0, 0.0, 0.35], [0.6, -0.4, 0.15])
    return SimilarityTransform(config.calibration.slam_scale, rigid)


@dataclass
class CalibrationResult:
    scale: float
    similarity: SimilarityTransform  # SLAM frame -> world
    reprojection_rms: float
    scale_truth: float


def calibrate_run(config: RunConfig) -> CalibrationResult:
    """Chessboard PnP on two synthetic pre-flight frames, then Eq.-style scale.

    The two calibration cameras face the board at different standoffs; their
    SLAM-frame poses apply the ground-truth map similarity. Corner pixels get
    seeded Gaussian noise of `corner_noise_px`.
    """
    board = default_board(config.calibration)
    slam_from_world = slam_frame_similarity(config)
    rng = stage_rng(config.seed, "calibration")

    grid = board.grid_points()
    center_board = grid.mean(axis=0)
    center_world = board.world_pose.apply(center_board)
    normal = board.world_pose.rotation.as_matrix()[:, 2]

    cam_positions = [
        center_world + 1.0 * normal + np.array([0.05, 0.0, 0.02]),
        center_world + 1.2 * normal + np.array([-0.25, 0.1, -0.05]),
    ]
    poses = [blur_sim.look_at_pose(c, center_world) for c in cam_positions]

    pnp_poses = []
    rms_values = []
    for pose in poses:
        p_cam = pose.apply(board.world_pose.apply(grid))
        uv, valid = project_batch(config.intrinsics, p_cam)
        if not np.all(valid):
            raise PipelineError("calibration board behind camera")
        uv = uv + rng.normal(0.0, 1.0, uv.shape) * config.calibration.corner_noise_px
        est, rms = calibration.solve_pnp(grid, uv, config.intrinsics)
        pnp_poses.append(est)  # board -> camera
        rms_values.append(rms)

    def slam_cam(world_to_cam):
        return invert(apply_similarity_to_camera(slam_from_world, world_to_cam))

    pair = calibration.CalibrationFramePair(
        p1_board=invert(pnp_poses[0]),
        p2_board=invert(pnp_poses[1]),
        p1_slam=slam_cam(poses[0]),
        p2_slam=slam_cam(poses[1]),
    )
    scale = calibration.estimate_scale(pair)
    similarity = calibration.align_frames(pair, board, scale)
    return CalibrationResult(
        scale=scale,
        similarity=similarity,
        reprojection_rms=float(max(rms_values)),
        scale_truth=1.0 / config.calibration.slam_scale,
    )


def _apply_map_correction(frontend: FrontendResult, config: RunConfig,
                          cal: CalibrationResult):
    """Hand the map over to the scaled SLAM frame, then back via the recovered
    similarity. With noiseless corners this is an exact round trip; corner
    noise leaves a small residual misalignment, as in a real calibration."""
    slam_from_world = slam_frame_similarity(config)
    correction = compose_similarity(cal.similarity, slam_from_world)
    graph = frontend.graph
    for kf in graph.keyframes.values():
        kf.pose = apply_similarity_to_camera(correction, kf.pose)
    for mp in graph.map_points.values():
        mp.position = correction.apply(mp.position)
    return correction


@dataclass
class ReconstructionOutcome:
    hypothesis: ObjectHypothesis
    record: reconstruction.ConvergenceRecord
    trigger_keyframe: int


def _initial_hypothesis(points: np.ndarray, associated_ids) -> ObjectHypothesis:
    centroid = points.mean(axis=0)
    half = np.maximum((points - centroid).max(axis=0), 0.1)
    code = np.clip(np.concatenate([half, [1.0, 1.0]]), CODE_LOW, CODE_HIGH)
    pose = RigidTransform(np.array([0.0, 0.0, 0.0, 1.0]), -centroid)
    return ObjectHypothesis(pose=pose, code=ShapeCode(code),
                            associated_point_ids=set(associated_ids),
                            status="reconstructing")


def _render_observations(config: RunConfig, frontend: FrontendResult,
                         associated, upto_kf: int):
    """Depth rays through associated map points plus exterior rays outside the mask."""
    graph = frontend.graph
    rcfg = config.reconstruction
    kf_ids = [k for k in graph.keyframe_ids()
              if k <= upto_kf and k in frontend.mask_rects]
    if not kf_ids:
        return []
    picks = np.unique(np.linspace(0, len(kf_ids) - 1,
                                  min(rcfg.render_keyframes, len(kf_ids))).astype(int))
    observations = []
    assoc = sorted(associated)
    for pi in picks:
        kf = graph.keyframes[kf_ids[pi]]
        origin = camera_center(kf.pose)
        rect = frontend.mask_rects[kf_ids[pi]]
        umin, vmin, umax, vmax = rect
        cam_to_world = invert(kf.pose)
        # Depth rays: evenly pick associated points in front of this camera.
        pts = np.array([graph.map_points[pid].position for pid in assoc])
        vecs = pts - origin
        depths = np.linalg.norm(vecs, axis=1)
        ok = depths > 1e-6
        idx = np.flatnonzero(ok)
        take = idx[np.unique(np.linspace(0, len(idx) - 1,
                             min(rcfg.depth_rays_per_keyframe, len(idx))).astype(int))] \
            if len(idx) else []
        for i in take:
            observations.append(RenderObservation(
                ray=reconstruction.Ray(origin, vecs[i]),
                in_mask=True, observed_depth=float(depths[i]),
            ))
        # Exterior rays: pixels just outside the inflated mask rect.
        margin_u = 0.12 * (umax - umin)
        margin_v = 0.12 * (vmax - vmin)
        ring = [
            (umin - margin_u, 0.5 * (vmin + vmax)),
            (umax + margin_u, 0.5 * (vmin + vmax)),
            (0.5 * (umin + umax), vmin - margin_v),
            (0.5 * (umin + umax), vmax + margin_v),
            (umin - margin_u, vmin - margin_v),
            (umax + margin_u, vmax + margin_v),
        ][: rcfg.exterior_rays_per_keyframe]
        for (u, v) in ring:
            d_cam = back_project(config.intrinsics, (u, v), 1.0)
            d_world = cam_to_world.rotation.apply(d_cam)
            observations.append(RenderObservation(
                ray=reconstruction.Ray(origin, d_world), in_mask=False,
            ))
    return observations


def reconstruct_object(config: RunConfig, frontend: FrontendResult,
                       policy: TriggerPolicy) -> ReconstructionOutcome:
    """Find the trigger keyframe from the association log, then fit the object."""
    graph = frontend.graph
    if frontend.first_seen_keyframe is None:
        raise PipelineError("object never observed")
    first_seen = frontend.first_seen_keyframe
    kf_ids = [k for k in graph.keyframe_ids() if k >= first_seen]
    assoc_by_kf = dict(frontend.association_log)
    associated: set[int] = set()
    trigger_kf = None
    for count, kid in enumerate(kf_ids, start=1):
        associated |= set(assoc_by_kf.get(kid, ()))
        if count >= policy.min_keyframes and len(associated) >= policy.min_associated_points:
            trigger_kf = kid
            break
    if trigger_kf is None:
        raise PipelineError(
            f"reconstruction never triggered (associated {len(associated)} points)"
        )
    points = np.array([graph.map_points[pid].position for pid in sorted(associated)])
    hyp = _initial_hypothesis(points, associated)
    observations = _render_observations(config, frontend, associated, trigger_kf)
    fitted, record = reconstruction.optimize_object(
        hyp, points, observations, config.reconstruction.weights,
        config.reconstruction.options,
    )
    entry = graph.objects[OBJECT_ID]
    entry.hypothesis = fitted
    return ReconstructionOutcome(hypothesis=fitted, record=record,
                                 trigger_keyframe=trigger_kf)


@dataclass
class PipelineResult:
    config: RunConfig
    scene: Scene
    frames: list
    frontend: FrontendResult
    calibration: CalibrationResult
    reconstruction: ReconstructionOutcome
    report: metrics.MetricsReport
    joint_residual: float


def run_pipeline_in_memory(config: RunConfig,
                           frames_override=None) -> PipelineResult:
    """All pipeline stages; returns the in-memory results (no files written)."""
    scene = blur_sim.generate_scene(config.scene)
    if frames_override is not None:
        frames = frames_override
    else:
        trajectory = blur_sim.generate_trajectory(config.trajectory)
        frames = blur_sim.simulate_frames(
            scene, trajectory, config.intrinsics, config.blur, config.deblur,
            config.seed,
        )
    frontend = run_frontend(config, scene, frames)
    cal = calibrate_run(config)
    _apply_map_correction(frontend, config, cal)
    outcome = reconstruct_object(config, frontend, config.trigger)
    _, residual = slam_graph.joint_optimize(
        frontend.graph, config.graph_weights, config.graph_options
    )
    # Joint optimization refines the object pose inside the graph.
    outcome.hypothesis = frontend.graph.objects[OBJECT_ID].hypothesis
    gt_box = tight_bounding_box(config.scene.object_code, config.scene.object_pose)
    report = metrics.evaluate_run(
        outcome.hypothesis,
        scene.object_points,
        gt_box,
        tau=config.metrics.tau,
        resolution=config.metrics.iou_samples,
        mesh_resolution=config.metrics.mesh_resolution,
        seed=int(stage_rng(config.seed, "metrics").integers(2 ** 31)),
    )
    return PipelineResult(
        config=config, scene=scene, frames=frames, frontend=frontend,
        calibration=cal, reconstruction=outcome, report=report,
        joint_residual=residual,
    )


def object_center_error(result_or_hypothesis, config: RunConfig) -> float:
    """Distance between reconstructed and true object centers, meters."""
    hyp = getattr(result_or_hypothesis, "hypothesis", result_or_hypothesis)
    est_center = invert(hyp.pose).translation
    true_center = invert(config.scene.object_pose).translation
    return float(np.linalg.norm(est_center - true_center))


def compare_reports(report_a: dict, report_b: dict) -> dict:
    """Side-by-side deltas between two metric reports (a = baseline)."""
    for key in ("distance_threshold",):
        if report_a.get(key) != report_b.get(key):
            raise ValueError(f"reports disagree on '{key}'")
    fields = [
        ("associated_point_count", "points", False),
        ("precision", "precision", False),
        ("recall", "recall", False),
        ("f_score", "f_score", False),
        ("rmse_sdf", "rmse_sdf", True),
        ("iou", "iou", False),
    ]
    rows = {}
    for key, label, lower_is_better in fields:
        a, b = report_a[key], report_b[key]
        delta = b - a
        pct = (delta / a * 100.0) if a not in (0, 0.0) else math.inf
        improved = delta < 0 if lower_is_better else delta > 0
        rows[label] = {
            "baseline": a, "candidate": b, "delta": delta,
            "percent_change": pct, "improved": bool(improved) if delta != 0 else False,
        }
    return rows


def comparison_text(rows: dict) -> str:
    lines = [f"{'metric':<12}{'baseline':>14}{'candidate':>14}"
             f"{'delta':>14}{'change %':>12}"]
    for label, r in rows.items():
        lines.append(
            f"{label:<12}{r['baseline']:>14.6g}{r['candidate']:>14.6g}"
            f"{r['delta']:>+14.6g}{r['percent_change']:>+12.2f}"
        )
    return "\n".join(lines)
