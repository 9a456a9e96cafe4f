"""Batch CLI: simulate, run, calibrate, evaluate, compare.

Each subcommand is independently invocable on saved artifacts. `run` executes
the full pipeline (blurred or deblurred per the config) and writes the
trajectory CSV, reconstructed-mesh PLY, metrics JSON, convergence CSV, run log,
and report figures into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import blur_sim, calibration, figures, io_formats, metrics, pipeline, slam_graph
from .config import RunConfig, config_from_dict, default_board, load_config
from .geometry import RigidTransform, invert
from .sdf_shapes import extract_mesh_points


@dataclasses.dataclass
class RunArtifacts:
    trajectory_csv: str
    mesh_ply: str
    metrics_json: str
    convergence_csv: str
    run_log: str


class _RunLog:
    def __init__(self, path):
        self.path = Path(path)
        self.lines = []

    def write(self, message):
        stamp = f"[{time.strftime('%Y-%m-%d %H:%M:%S')}] {message}"
        self.lines.append(stamp)
        self.path.write_text("\n".join(self.lines) + "\n")


def run_pipeline(config: RunConfig, frames_override=None) -> RunArtifacts:
    """Execute all stages, writing artifacts as each stage completes.

    A late-stage failure leaves earlier artifacts on disk and records the
    error in the run log before re-raising.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = RunArtifacts(
        trajectory_csv=str(out / "trajectory.csv"),
        mesh_ply=str(out / "mesh.ply"),
        metrics_json=str(out / "metrics.json"),
        convergence_csv=str(out / "convergence.csv"),
        run_log=str(out / "run.log"),
    )
    log = _RunLog(artifacts.run_log)
    try:
        log.write(f"seed={config.seed} deblur={config.deblur is not None}")
        scene = blur_sim.generate_scene(config.scene)
        io_formats.write_ply(out / "scene_object.ply", scene.object_points)
        if frames_override is not None:
            frames = frames_override
            log.write(f"ingested {len(frames)} external frames")
        else:
            trajectory = blur_sim.generate_trajectory(config.trajectory)
            frames = blur_sim.simulate_frames(
                scene, trajectory, config.intrinsics, config.blur,
                config.deblur, config.seed,
            )
            log.write(f"simulated {len(frames)} frames")
        io_formats.write_frames_jsonl(out / "frames.jsonl", frames)

        frontend = pipeline.run_frontend(config, scene, frames)
        log.write(
            f"frontend: {len(frontend.graph.keyframes)} keyframes, "
            f"{len(frontend.graph.map_points)} map points, "
            f"{len(frontend.lost_intervals)} lost intervals"
        )
        slam_graph.export_trajectory_csv(frontend.graph, artifacts.trajectory_csv)

        cal = pipeline.calibrate_run(config)
        pipeline._apply_map_correction(frontend, config, cal)
        log.write(f"calibration: scale={cal.scale:.6f} "
                  f"(truth {cal.scale_truth:.6f}), pnp rms={cal.reprojection_rms:.4g} px")

        outcome = pipeline.reconstruct_object(config, frontend, config.trigger)
        outcome.record.to_csv(artifacts.convergence_csv)
        log.write(f"reconstruction triggered at keyframe {outcome.trigger_keyframe}, "
                  f"{len(outcome.record.rows)} iterations")

        _, residual = slam_graph.joint_optimize(
            frontend.graph, config.graph_weights, config.graph_options
        )
        outcome.hypothesis = frontend.graph.objects[pipeline.OBJECT_ID].hypothesis
        log.write(f"joint optimization residual {residual:.6g}")

        # Refreshed trajectory after joint optimization.
        slam_graph.export_trajectory_csv(frontend.graph, artifacts.trajectory_csv)
        mesh_obj = extract_mesh_points(outcome.hypothesis.code,
                                       config.metrics.mesh_resolution)
        mesh_world = invert(outcome.hypothesis.pose).apply(mesh_obj)
        io_formats.write_ply(artifacts.mesh_ply, mesh_world)

        from .sdf_shapes import tight_bounding_box

        gt_box = tight_bounding_box(config.scene.object_code,
                                    config.scene.object_pose)
        report = metrics.evaluate_run(
            outcome.hypothesis, scene.object_points, gt_box,
            tau=config.metrics.tau, resolution=config.metrics.iou_samples,
            mesh_resolution=config.metrics.mesh_resolution,
            seed=int(blur_sim.stage_rng(config.seed, "metrics").integers(2 ** 31)),
        )
        payload = {
            "metrics": report.to_dict(),
            "tracking": {
                "lost_intervals": [list(iv) for iv in frontend.lost_intervals],
                "lost_interval_count": len(frontend.lost_intervals),
            },
            "calibration": {
                "scale": cal.scale,
                "scale_truth": cal.scale_truth,
                "reprojection_rms_px": cal.reprojection_rms,
            },
            "trigger_keyframe": outcome.trigger_keyframe,
            "seed": config.seed,
            "deblur": config.deblur is not None,
        }
        io_formats.write_json(artifacts.metrics_json, payload)
        log.write(
            f"metrics: P={report.precision:.3f} R={report.recall:.3f} "
            f"F={report.f_score:.3f} rmse={report.rmse_sdf:.4f} iou={report.iou:.3f} "
            f"points={report.associated_point_count}"
        )

        figures.plot_convergence(outcome.record, out / "convergence.png")
        obj_center = invert(config.scene.object_pose).translation
        figures.plot_trajectory(frontend.graph, frontend.keyframe_truth,
                                out / "trajectory.png", object_center=obj_center)
        log.write("done")
        return artifacts
    except Exception as exc:  # record and re-raise for a nonzero exit
        log.write(f"error: {exc}")
        log.write(traceback.format_exc())
        raise


def compare_runs(metrics_path_a, metrics_path_b, out_dir=None):
    """Side-by-side comparison of two runs' metrics files."""
    doc_a = io_formats.read_json(metrics_path_a)
    doc_b = io_formats.read_json(metrics_path_b)
    rows = pipeline.compare_reports(doc_a["metrics"], doc_b["metrics"])
    text = pipeline.comparison_text(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io_formats.write_json(out / "comparison.json", rows)
        figures.plot_comparison(rows, out / "comparison.png")
        (out / "comparison.txt").write_text(text + "\n")
    return rows, text


def ingest_external_frames(path):
    """Validated frame stream from a JSON-lines file (replaces simulation)."""
    return io_formats.read_frames_jsonl(path)


def _cmd_run(args):
    config = load_config(args.config) if args.config else config_from_dict({})
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides or args.no_deblur:
        doc = io_formats.read_json(args.config) if args.config else {}
        doc.update(overrides)
        if args.no_deblur:
            doc["deblur"] = None
        config = config_from_dict(doc)
    frames = ingest_external_frames(args.frames) if args.frames else None
    artifacts = run_pipeline(config, frames_override=frames)
    print(f"artifacts written to {config.output_dir}")
    print(f"metrics: {artifacts.metrics_json}")
    return 0


def _cmd_simulate(args):
    config = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        doc = io_formats.read_json(args.config) if args.config else {}
        doc["seed"] = args.seed
        config = config_from_dict(doc)
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = blur_sim.generate_scene(config.scene)
    trajectory = blur_sim.generate_trajectory(config.trajectory)
    frames = blur_sim.simulate_frames(scene, trajectory, config.intrinsics,
                                      config.blur, config.deblur, config.seed)
    io_formats.write_ply(out / "scene_object.ply", scene.object_points)
    io_formats.write_ply(out / "scene_all.ply", scene.points)
    io_formats.write_frames_jsonl(out / "frames.jsonl", frames)
    print(f"wrote {len(frames)} frames to {out / 'frames.jsonl'}")
    return 0


def _cmd_calibrate(args):
    doc = io_formats.read_json(args.input)
    k = doc["intrinsics"]
    from .geometry import CameraIntrinsics

    intr = CameraIntrinsics(fx=k["fx"], fy=k["fy"], cx=k["cx"], cy=k["cy"],
                            width=k["width"], height=k["height"])
    b = doc["board"]
    board = calibration.ChessboardSpec(
        inner_rows=b["inner_rows"], inner_cols=b["inner_cols"],
        square_size=b["square_size"],
        world_pose=RigidTransform(np.array(b["world_pose"]["q"]),
                                  np.array(b["world_pose"]["t"])),
    )
    grid = board.grid_points()
    poses = []
    rms_all = []
    for frame in doc["frames"]:
        corners = np.asarray(frame["corners"], dtype=float)
        pose, rms = calibration.solve_pnp(grid, corners, intr)
        poses.append(pose)
        rms_all.append(rms)
    slam_poses = [
        RigidTransform(np.array(f["slam_pose"]["q"]), np.array(f["slam_pose"]["t"]))
        for f in doc["frames"]
    ]
    pair = calibration.CalibrationFramePair(
        p1_board=invert(poses[0]), p2_board=invert(poses[1]),
        p1_slam=slam_poses[0], p2_slam=slam_poses[1],
    )
    scale = calibration.estimate_scale(pair)
    sim = calibration.align_frames(pair, board, scale)
    result = {
        "scale": scale,
        "similarity": {
            "scale": sim.scale,
            "q": [float(v) for v in sim.rigid.quat],
            "t": [float(v) for v in sim.rigid.translation],
        },
        "reprojection_rms_px": float(max(rms_all)),
    }
    out_path = args.out or "calibration_result.json"
    io_formats.write_json(out_path, result)
    print(f"scale={scale:.9g}, wrote {out_path}")
    return 0


def _cmd_evaluate(args):
    pred = io_formats.read_ply(args.mesh)
    gt = io_formats.read_ply(args.gt)
    p, r, f = metrics.precision_recall_fscore(pred, gt, args.tau)
    rmse = metrics.rmse_sdf(pred, gt)
    result = {"precision": p, "recall": r, "f_score": f, "rmse_sdf": rmse,
              "distance_threshold": args.tau}
    if args.out:
        io_formats.write_json(args.out, result)
    print(f"P={p:.4f} R={r:.4f} F={f:.4f} rmse={rmse:.5f} (tau={args.tau})")
    return 0


def _cmd_compare(args):
    _, text = compare_runs(args.report_a, args.report_b, out_dir=args.out)
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="objslam",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline from a config file")
    p_run.add_argument("--config", help="JSON config file (defaults if omitted)")
    p_run.add_argument("--no-deblur", action="store_true",
                       help="force the deblur stage off")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--frames", help="ingest a JSON-lines frame stream "
                                        "instead of simulating")
    p_run.set_defaults(func=_cmd_run)

    p_sim = sub.add_parser("simulate", help="scene + frame stream only")
    p_sim.add_argument("--config")
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--out")
    p_sim.set_defaults(func=_cmd_simulate)

    p_cal = sub.add_parser("calibrate", help="scale + alignment from a "
                                             "calibration input JSON")
    p_cal.add_argument("--input", required=True)
    p_cal.add_argument("--out")
    p_cal.set_defaults(func=_cmd_calibrate)

    p_eval = sub.add_parser("evaluate", help="point-cloud metrics on saved PLYs")
    p_eval.add_argument("--mesh", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--tau", type=float, default=0.05)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_cmp = sub.add_parser("compare", help="diff two metrics JSON reports")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")
    p_cmp.add_argument("--out")
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
