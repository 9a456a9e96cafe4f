"""Run configuration: one JSON document, one section per module, strict keys.

Unknown keys are rejected rather than ignored; every tunable constant of the
simulation, optimizer, and metrics has a named default here and can be
overridden from the file. All randomness derives from the single master seed
(per-stage generators hash the stage name with the seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blur_sim import BlurModel, DeblurOperator, SceneSpec, TrajectorySpec
from .calibration import ChessboardSpec
from .geometry import CameraIntrinsics, RigidTransform
from .reconstruction import EnergyWeights, OptimizeOptions
from .sdf_shapes import ShapeCode
from .slam_graph import GraphOptimizeOptions, GraphWeights, TriggerPolicy


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SlamFrontendConfig:
    keyframe_stride: int = 4
    tracking_threshold: int = 30
    odometry_translation_sigma: float = 0.004  # meters per frame step, at zero blur
    odometry_rotation_sigma: float = 0.002  # radians per frame step, at zero blur
    map_point_sigma: float = 0.01  # meters, at zero blur
    max_observations_per_keyframe: int = 40
    mask_inflation: float = 0.05


@dataclass(frozen=True)
class ReconstructionConfig:
    weights: EnergyWeights = EnergyWeights()
    options: OptimizeOptions = OptimizeOptions(max_iterations=60)
    render_keyframes: int = 4
    depth_rays_per_keyframe: int = 10
    exterior_rays_per_keyframe: int = 6


@dataclass(frozen=True)
class CalibrationConfig:
    slam_scale: float = 0.8  # ground-truth metric scale injected into the map frame
    corner_noise_px: float = 0.0
    board_rows: int = 6
    board_cols: int = 9
    square_size: float = 0.05


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.05
    iou_samples: int = 32 ** 3
    mesh_resolution: int = 48


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    scene: SceneSpec = field(default_factory=lambda: _default_scene(0))
    trajectory: TrajectorySpec = TrajectorySpec(
        duration=24.0, frame_rate=15.0, speed_modulation=0.8
    )
    intrinsics: CameraIntrinsics = CameraIntrinsics(
        fx=450.0, fy=450.0, cx=320.0, cy=240.0, width=640, height=480
    )
    blur: BlurModel = BlurModel()
    deblur: DeblurOperator | None = None
    slam: SlamFrontendConfig = SlamFrontendConfig()
    trigger: TriggerPolicy = TriggerPolicy()
    reconstruction: ReconstructionConfig = ReconstructionConfig()
    graph_weights: GraphWeights = GraphWeights()
    graph_options: GraphOptimizeOptions = GraphOptimizeOptions(max_iterations=8)
    calibration: CalibrationConfig = CalibrationConfig()
    metrics: MetricsConfig = MetricsConfig()


def _default_scene(seed: int) -> SceneSpec:
    code = ShapeCode(np.array([1.6, 0.9, 0.65, 0.9, 0.7]))  # car-ish proportions
    return SceneSpec(
        object_code=code,
        object_pose=RigidTransform.identity(),
        object_point_count=2000,
        background_point_count=1500,
        background_extent=12.0,
        seed=seed,
    )


def default_board(cfg: CalibrationConfig) -> ChessboardSpec:
    board_pose = RigidTransform.from_rotvec(
        [np.pi / 2.0, 0.0, 0.0], [-0.3, -1.2, 0.2]
    )
    return ChessboardSpec(
        inner_rows=cfg.board_rows,
        inner_cols=cfg.board_cols,
        square_size=cfg.square_size,
        world_pose=board_pose,
    )


def _take(section: dict, defaults: dict, where: str) -> dict:
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(section)
    return merged


_TOP_KEYS = {
    "seed", "output_dir", "scene", "trajectory", "intrinsics", "blur", "deblur",
    "slam", "trigger", "reconstruction", "graph", "calibration", "metrics",
}


def config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(doc.get("seed", 0))
    out_dir = doc.get("output_dir", "runs/out")

    sc = _take(doc.get("scene", {}), {
        "object_code": [1.6, 0.9, 0.65, 0.9, 0.7],
        "object_position": [0.0, 0.0, 0.0],
        "object_yaw": 0.0,
        "object_point_count": 2000,
        "background_point_count": 1500,
        "background_extent": 12.0,
    }, "scene")
    obj_to_world = RigidTransform.from_rotvec(
        [0.0, 0.0, float(sc["object_yaw"])], sc["object_position"]
    )
    from .geometry import invert

    scene = SceneSpec(
        object_code=ShapeCode(np.asarray(sc["object_code"], dtype=float)),
        object_pose=invert(obj_to_world),
        object_point_count=int(sc["object_point_count"]),
        background_point_count=int(sc["background_point_count"]),
        background_extent=float(sc["background_extent"]),
        seed=seed,
    )

    tr = _take(doc.get("trajectory", {}), {
        "semi_axis_x": 4.0, "semi_axis_y": 2.5, "height": 1.5,
        "duration": 24.0, "frame_rate": 15.0, "speed_modulation": 0.8,
        "speed_cycles": 3, "start_angle": 0.0,
    }, "trajectory")
    trajectory = TrajectorySpec(**{k: (int(v) if k == "speed_cycles" else float(v))
                                   for k, v in tr.items()})

    ki = _take(doc.get("intrinsics", {}), {
        "fx": 450.0, "fy": 450.0, "cx": 320.0, "cy": 240.0,
        "width": 640, "height": 480,
    }, "intrinsics")
    intrinsics = CameraIntrinsics(
        fx=float(ki["fx"]), fy=float(ki["fy"]), cx=float(ki["cx"]),
        cy=float(ki["cy"]), width=int(ki["width"]), height=int(ki["height"]),
    )

    bl = _take(doc.get("blur", {}), {
        "exposure": 0.03, "blur_gain": 500.0, "base_feature_count": 200,
        "yield_decay": 3.0, "noise_floor": 0.3, "noise_gain": 0.4,
    }, "blur")
    blur = BlurModel(
        exposure=float(bl["exposure"]), blur_gain=float(bl["blur_gain"]),
        base_feature_count=int(bl["base_feature_count"]),
        yield_decay=float(bl["yield_decay"]), noise_floor=float(bl["noise_floor"]),
        noise_gain=float(bl["noise_gain"]),
    )

    deblur = None
    if doc.get("deblur") is not None:
        db = _take(doc["deblur"], {"efficiency": 0.8}, "deblur")
        deblur = DeblurOperator(efficiency=float(db["efficiency"]))

    sl = _take(doc.get("slam", {}), {
        "keyframe_stride": 4, "tracking_threshold": 30,
        "odometry_translation_sigma": 0.004, "odometry_rotation_sigma": 0.002,
        "map_point_sigma": 0.01, "max_observations_per_keyframe": 40,
        "mask_inflation": 0.05,
    }, "slam")
    slam = SlamFrontendConfig(
        keyframe_stride=int(sl["keyframe_stride"]),
        tracking_threshold=int(sl["tracking_threshold"]),
        odometry_translation_sigma=float(sl["odometry_translation_sigma"]),
        odometry_rotation_sigma=float(sl["odometry_rotation_sigma"]),
        map_point_sigma=float(sl["map_point_sigma"]),
        max_observations_per_keyframe=int(sl["max_observations_per_keyframe"]),
        mask_inflation=float(sl["mask_inflation"]),
    )

    tg = _take(doc.get("trigger", {}),
               {"min_keyframes": 50, "min_associated_points": 20}, "trigger")
    trigger = TriggerPolicy(min_keyframes=int(tg["min_keyframes"]),
                            min_associated_points=int(tg["min_associated_points"]))

    rcd = _take(doc.get("reconstruction", {}), {
        "lambda_s": 1.0, "lambda_r": 0.5, "lambda_c": 0.01,
        "max_iterations": 60, "render_keyframes": 4,
        "depth_rays_per_keyframe": 10, "exterior_rays_per_keyframe": 6,
    }, "reconstruction")
    reconstruction = ReconstructionConfig(
        weights=EnergyWeights(float(rcd["lambda_s"]), float(rcd["lambda_r"]),
                              float(rcd["lambda_c"])),
        options=OptimizeOptions(max_iterations=int(rcd["max_iterations"])),
        render_keyframes=int(rcd["render_keyframes"]),
        depth_rays_per_keyframe=int(rcd["depth_rays_per_keyframe"]),
        exterior_rays_per_keyframe=int(rcd["exterior_rays_per_keyframe"]),
    )

    gr = _take(doc.get("graph", {}), {
        "odometry_weight": 100.0, "reprojection_weight": 1e-3,
        "object_surface_weight": 1.0, "max_iterations": 8,
    }, "graph")
    graph_weights = GraphWeights(
        odometry=float(gr["odometry_weight"]),
        reprojection=float(gr["reprojection_weight"]),
        object_surface=float(gr["object_surface_weight"]),
    )
    graph_options = GraphOptimizeOptions(max_iterations=int(gr["max_iterations"]))

    cal = _take(doc.get("calibration", {}), {
        "slam_scale": 0.8, "corner_noise_px": 0.0,
        "board_rows": 6, "board_cols": 9, "square_size": 0.05,
    }, "calibration")
    calibration = CalibrationConfig(
        slam_scale=float(cal["slam_scale"]),
        corner_noise_px=float(cal["corner_noise_px"]),
        board_rows=int(cal["board_rows"]), board_cols=int(cal["board_cols"]),
        square_size=float(cal["square_size"]),
    )

    me = _take(doc.get("metrics", {}), {
        "tau": 0.05, "iou_samples": 32 ** 3, "mesh_resolution": 48,
    }, "metrics")
    metrics = MetricsConfig(tau=float(me["tau"]), iou_samples=int(me["iou_samples"]),
                            mesh_resolution=int(me["mesh_resolution"]))

    return RunConfig(
        seed=seed, output_dir=str(out_dir), scene=scene, trajectory=trajectory,
        intrinsics=intrinsics, blur=blur, deblur=deblur, slam=slam,
        trigger=trigger, reconstruction=reconstruction,
        graph_weights=graph_weights, graph_options=graph_options,
        calibration=calibration, metrics=metrics,
    )


def load_config(path) -> RunConfig:
    from .io_formats import read_json

    return config_from_dict(read_json(path))
