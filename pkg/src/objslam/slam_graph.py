"""Keyframe/map-point bookkeeping and the joint factor-graph optimizer.

The graph holds keyframes (chained by odometry factors), map points (observed
by keyframes through pixel measurements), and object hypotheses whose
associated points add SDF surface factors. joint_optimize runs damped
Gauss-Newton over all keyframe poses (first one fixed as gauge), map-point
positions, and object poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    exp_se3,
    invert,
    log_se3,
    relative,
    skew,
)
from .reconstruction import ObjectHypothesis
from .sdf_shapes import sdf_eval, sdf_gradients_points

DEFAULT_TRACKING_THRESHOLD = 30


class GraphError(ValueError):
    pass


@dataclass
class Keyframe:
    id: int
    pose: RigidTransform  # world -> camera
    timestamp: float
    observations: list = field(default_factory=list)  # (map_point_id, pixel (2,))
    blur_level: float = 0.0


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    observation_count: int = 1
    object_id: int | None = None


@dataclass(frozen=True)
class OdometryFactor:
    from_id: int
    to_id: int
    relative: RigidTransform  # pose_from^-1 . pose_to at insertion time
    weight: float = 1.0


@dataclass(frozen=True)
class TriggerPolicy:
    min_keyframes: int = 50
    min_associated_points: int = 20

    def __post_init__(self):
        if self.min_keyframes < 1:
            raise ValueError("min_keyframes must be >= 1")


@dataclass
class ObjectEntry:
    hypothesis: ObjectHypothesis
    first_seen_keyframe: int


@dataclass
class FactorGraph:
    intrinsics: CameraIntrinsics
    keyframes: dict = field(default_factory=dict)
    map_points: dict = field(default_factory=dict)
    objects: dict = field(default_factory=dict)
    odometry: list = field(default_factory=list)

    def keyframe_ids(self):
        return sorted(self.keyframes)

    def latest_keyframe(self) -> Keyframe:
        if not self.keyframes:
            raise GraphError("graph has no keyframes")
        return self.keyframes[self.keyframe_ids()[-1]]


def add_map_point(graph: FactorGraph, point_id: int, position) -> MapPoint:
    if point_id in graph.map_points:
        raise GraphError(f"duplicate map point id {point_id}")
    mp = MapPoint(id=point_id, position=np.asarray(position, dtype=float).reshape(3))
    graph.map_points[point_id] = mp
    return mp


def add_object(graph: FactorGraph, object_id: int, hypothesis: ObjectHypothesis,
               first_seen_keyframe: int):
    if object_id in graph.objects:
        raise GraphError(f"duplicate object id {object_id}")
    graph.objects[object_id] = ObjectEntry(hypothesis, first_seen_keyframe)


def add_keyframe(graph: FactorGraph, keyframe: Keyframe,
                 odometry_weight: float = 1.0) -> FactorGraph:
    """Insert a keyframe, chaining an odometry factor to its predecessor."""
    ids = graph.keyframe_ids()
    if ids and keyframe.id <= ids[-1]:
        raise GraphError(
            f"keyframe id {keyframe.id} does not exceed latest id {ids[-1]}"
        )
    for pid, _ in keyframe.observations:
        if pid not in graph.map_points:
            raise GraphError(f"observation references unknown map point {pid}")
    if ids:
        prev = graph.keyframes[ids[-1]]
        graph.odometry.append(
            OdometryFactor(
                from_id=prev.id,
                to_id=keyframe.id,
                relative=relative(prev.pose, keyframe.pose),
                weight=odometry_weight,
            )
        )
    graph.keyframes[keyframe.id] = keyframe
    for pid, _ in keyframe.observations:
        graph.map_points[pid].observation_count += 1
    return graph


def validate(graph: FactorGraph):
    """Exhaustive reference check: raises GraphError on any dangling factor."""
    for factor in graph.odometry:
        if factor.from_id not in graph.keyframes or factor.to_id not in graph.keyframes:
            raise GraphError("odometry factor references missing keyframe")
    for kf in graph.keyframes.values():
        for pid, _ in kf.observations:
            if pid not in graph.map_points:
                raise GraphError("observation references missing map point")
    for obj in graph.objects.values():
        for pid in obj.hypothesis.associated_point_ids:
            if pid not in graph.map_points:
                raise GraphError("object references missing map point")


def associate_points(graph: FactorGraph, object_id: int, mask_predicate,
                     position_filter=None) -> int:
    """Tag unassociated map points projecting inside the mask of the latest keyframe.

    Idempotent: already-tagged points are never re-counted. An optional
    position_filter(world_point) gates candidates in 3D (the simulated mask is
    a projected box, so distant background can fall inside it).
    """
    if object_id not in graph.objects:
        raise GraphError(f"unknown object {object_id}")
    kf = graph.latest_keyframe()
    entry = graph.objects[object_id]
    count = 0
    for mp in graph.map_points.values():
        if mp.object_id is not None:
            continue
        if position_filter is not None and not position_filter(mp.position):
            continue
        p_cam = kf.pose.apply(mp.position)
        if p_cam[2] <= 1e-9:
            continue
        u = graph.intrinsics.fx * p_cam[0] / p_cam[2] + graph.intrinsics.cx
        v = graph.intrinsics.fy * p_cam[1] / p_cam[2] + graph.intrinsics.cy
        if mask_predicate((u, v)):
            mp.object_id = object_id
            entry.hypothesis.associated_point_ids.add(mp.id)
            count += 1
    return count


def should_reconstruct(policy: TriggerPolicy, graph: FactorGraph,
                       object_id: int) -> bool:
    """Keyframe-count and point-count gate before reconstruction starts."""
    if object_id not in graph.objects:
        raise GraphError(f"unknown object {object_id}")
    entry = graph.objects[object_id]
    seen = sum(1 for kid in graph.keyframes if kid >= entry.first_seen_keyframe)
    points = len(entry.hypothesis.associated_point_ids)
    return seen >= policy.min_keyframes and points >= policy.min_associated_points


def simulate_tracking(graph: FactorGraph, frame_features,
                      threshold: int = DEFAULT_TRACKING_THRESHOLD) -> str:
    """Frontend status for a frame: 'tracked' or 'lost' by matched-feature count."""
    return "tracked" if len(frame_features) >= threshold else "lost"


@dataclass(frozen=True)
class GraphWeights:
    odometry: float = 100.0
    reprojection: float = 1e-3
    object_surface: float = 1.0


@dataclass(frozen=True)
class GraphOptimizeOptions:
    max_iterations: int = 50
    residual_rel_tol: float = 1e-6
    gradient_tol: float = 1e-8
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5


class _GraphState:
    """Flattened optimization state over keyframe poses, points, object poses."""

    def __init__(self, graph: FactorGraph):
        self.kf_ids = graph.keyframe_ids()
        if not self.kf_ids:
            raise GraphError("cannot optimize an empty graph")
        self.free_kf = self.kf_ids[1:]  # first keyframe fixed as gauge
        self.point_ids = sorted(graph.map_points)
        self.obj_ids = sorted(graph.objects)
        self.kf_offset = {kid: 6 * i for i, kid in enumerate(self.free_kf)}
        base = 6 * len(self.free_kf)
        self.pt_offset = {pid: base + 3 * i for i, pid in enumerate(self.point_ids)}
        base += 3 * len(self.point_ids)
        self.obj_offset = {oid: base + 6 * i for i, oid in enumerate(self.obj_ids)}
        self.dim = base + 6 * len(self.obj_ids)

        self.poses = {kid: graph.keyframes[kid].pose for kid in self.kf_ids}
        self.points = {
            pid: graph.map_points[pid].position.copy() for pid in self.point_ids
        }
        self.obj_poses = {
            oid: graph.objects[oid].hypothesis.pose for oid in self.obj_ids
        }

    def perturbed(self, delta: np.ndarray) -> "_GraphState":
        out = object.__new__(_GraphState)
        out.__dict__.update(self.__dict__)
        out.poses = dict(self.poses)
        out.points = dict(self.points)
        out.obj_poses = dict(self.obj_poses)
        for kid, off in self.kf_offset.items():
            out.poses[kid] = compose(exp_se3(delta[off:off + 6]), self.poses[kid])
        for pid, off in self.pt_offset.items():
            out.points[pid] = self.points[pid] + delta[off:off + 3]
        for oid, off in self.obj_offset.items():
            out.obj_poses[oid] = compose(exp_se3(delta[off:off + 6]),
                                         self.obj_poses[oid])
        return out

    def write_back(self, graph: FactorGraph):
        for kid in self.kf_ids:
            graph.keyframes[kid].pose = self.poses[kid]
        for pid in self.point_ids:
            graph.map_points[pid].position = self.points[pid]
        for oid in self.obj_ids:
            graph.objects[oid].hypothesis.pose = self.obj_poses[oid]


def _check_connected(graph: FactorGraph):
    ids = graph.keyframe_ids()
    if len(ids) <= 1:
        return
    reached = {ids[0]}
    edges = {}
    for f in graph.odometry:
        edges.setdefault(f.from_id, set()).add(f.to_id)
        edges.setdefault(f.to_id, set()).add(f.from_id)
    frontier = [ids[0]]
    while frontier:
        k = frontier.pop()
        for nxt in edges.get(k, ()):  # noqa: B007
            if nxt not in reached:
                reached.add(nxt)
                frontier.append(nxt)
    if set(ids) - reached:
        raise GraphError("graph is not connected through odometry factors")


def _graph_residuals(graph: FactorGraph, state: _GraphState,
                     weights: GraphWeights):
    """Stacked residual vector for the current state."""
    k = graph.intrinsics
    parts = []
    sw_o = np.sqrt(weights.odometry)
    for f in graph.odometry:
        rel = relative(state.poses[f.from_id], state.poses[f.to_id])
        err = log_se3(compose(invert(f.relative), rel))
        parts.append(sw_o * np.sqrt(f.weight) * err)
    sw_r = np.sqrt(weights.reprojection)
    for kid in state.kf_ids:
        kf = graph.keyframes[kid]
        if not kf.observations:
            continue
        pids = [pid for pid, _ in kf.observations]
        pix = np.array([np.asarray(px, dtype=float) for _, px in kf.observations])
        pts = np.array([state.points[pid] for pid in pids])
        q = state.poses[kid].apply(pts)
        z = np.maximum(q[:, 2], 1e-3)
        uv = np.column_stack([k.fx * q[:, 0] / z + k.cx,
                              k.fy * q[:, 1] / z + k.cy])
        parts.append(sw_r * (uv - pix).ravel())
    sw_s = np.sqrt(weights.object_surface)
    for oid in state.obj_ids:
        entry = graph.objects[oid]
        pids = sorted(entry.hypothesis.associated_point_ids)
        if not pids:
            continue
        pts = np.array([state.points[pid] for pid in pids])
        q = state.obj_poses[oid].apply(pts)
        parts.append(sw_s * sdf_eval(entry.hypothesis.code, q)
                     / np.sqrt(len(pids)))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def _graph_jacobian(graph: FactorGraph, state: _GraphState,
                    weights: GraphWeights):
    """Sparse Jacobian matching _graph_residuals row ordering."""
    k = graph.intrinsics
    rows, cols, vals = [], [], []
    row = 0

    def put(r, c, block):
        b = np.atleast_2d(block)
        for i in range(b.shape[0]):
            for j in range(b.shape[1]):
                rows.append(r + i)
                cols.append(c + j)
                vals.append(b[i, j])

    sw_o = np.sqrt(weights.odometry)
    h = 1e-7
    for f in graph.odometry:
        w = sw_o * np.sqrt(f.weight)

        def odo_err(pose_i, pose_j):
            return log_se3(compose(invert(f.relative), relative(pose_i, pose_j)))

        pi, pj = state.poses[f.from_id], state.poses[f.to_id]
        for kid, pose, other, first in ((f.from_id, pi, pj, True),
                                        (f.to_id, pj, pi, False)):
            if kid not in state.kf_offset:
                continue
            block = np.empty((6, 6))
            for col in range(6):
                xi = np.zeros(6)
                xi[col] = h
                pp = compose(exp_se3(xi), pose)
                xi[col] = -h
                pm = compose(exp_se3(xi), pose)
                if first:
                    ep = odo_err(pp, other)
                    em = odo_err(pm, other)
                else:
                    ep = odo_err(other, pp)
                    em = odo_err(other, pm)
                block[:, col] = w * (ep - em) / (2.0 * h)
            put(row, state.kf_offset[kid], block)
        row += 6

    sw_r = np.sqrt(weights.reprojection)
    for kid in state.kf_ids:
        kf = graph.keyframes[kid]
        if not kf.observations:
            continue
        pids = [pid for pid, _ in kf.observations]
        pts = np.array([state.points[pid] for pid in pids])
        pose = state.poses[kid]
        rot = pose.rotation.as_matrix()
        q = pose.apply(pts)
        z = np.maximum(q[:, 2], 1e-3)
        for i, pid in enumerate(pids):
            dpi = np.array([
                [k.fx / z[i], 0.0, -k.fx * q[i, 0] / z[i] ** 2],
                [0.0, k.fy / z[i], -k.fy * q[i, 1] / z[i] ** 2],
            ])
            dq_dxi = np.hstack([-skew(q[i]), np.eye(3)])
            if kid in state.kf_offset:
                put(row, state.kf_offset[kid], sw_r * dpi @ dq_dxi)
            put(row, state.pt_offset[pid], sw_r * dpi @ rot)
            row += 2

    sw_s = np.sqrt(weights.object_surface)
    for oid in state.obj_ids:
        entry = graph.objects[oid]
        pids = sorted(entry.hypothesis.associated_point_ids)
        if not pids:
            continue
        pts = np.array([state.points[pid] for pid in pids])
        pose = state.obj_poses[oid]
        rot = pose.rotation.as_matrix()
        q = pose.apply(pts)
        g = sdf_gradients_points(entry.hypothesis.code, q)
        scale = sw_s / np.sqrt(len(pids))
        for i, pid in enumerate(pids):
            put(row, state.obj_offset[oid],
                scale * (g[i] @ np.hstack([-skew(q[i]), np.eye(3)])))
            put(row, state.pt_offset[pid], scale * (g[i] @ rot))
            row += 1

    mat = scipy.sparse.coo_matrix(
        (vals, (rows, cols)), shape=(row, state.dim)
    )
    return mat.tocsr()


def joint_optimize(graph: FactorGraph, weights: GraphWeights = GraphWeights(),
                   options: GraphOptimizeOptions = GraphOptimizeOptions()):
    """Damped Gauss-Newton over all poses, points, and object poses.

    The first keyframe pose is held fixed as gauge. Returns (graph, total
    residual norm squared); the graph is updated in place.
    """
    _check_connected(graph)
    state = _GraphState(graph)
    r = _graph_residuals(graph, state, weights)
    if len(r) == 0:
        return graph, 0.0
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise RuntimeError("diverged: non-finite initial residual")
    damping = options.initial_damping
    eye = scipy.sparse.identity(state.dim, format="csr")

    for _ in range(options.max_iterations):
        jac = _graph_jacobian(graph, state, weights)
        grad = jac.T @ r
        if np.linalg.norm(grad) < options.gradient_tol:
            break
        hess = (jac.T @ jac).tocsr()
        accepted = False
        for _ in range(12):
            step = scipy.sparse.linalg.spsolve(hess + damping * eye, -grad)
            new_state = state.perturbed(step)
            new_r = _graph_residuals(graph, new_state, weights)
            new_cost = float(new_r @ new_r)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            damping *= options.damping_up
        if not accepted:
            break
        rel_drop = (cost - new_cost) / max(cost, 1e-30)
        state, r, cost = new_state, new_r, new_cost
        damping = max(damping * options.damping_down, 1e-12)
        if rel_drop < options.residual_rel_tol:
            break

    if not np.isfinite(cost):
        raise RuntimeError("diverged: non-finite residual")
    state.write_back(graph)
    return graph, cost


def export_trajectory_csv(graph: FactorGraph, path):
    """Per-keyframe rows: timestamp, tx, ty, tz, qx, qy, qz, qw (9 sig digits)."""
    with open(path, "w") as f:
        f.write("timestamp,tx,ty,tz,qx,qy,qz,qw\n")
        for kid in graph.keyframe_ids():
            kf = graph.keyframes[kid]
            t = kf.pose.translation
            q = kf.pose.quat
            f.write(
                f"{kf.timestamp:.9g},{t[0]:.9g},{t[1]:.9g},{t[2]:.9g},"
                f"{q[0]:.9g},{q[1]:.9g},{q[2]:.9g},{q[3]:.9g}\n"
            )
