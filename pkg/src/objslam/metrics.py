"""Reconstruction quality metrics: precision/recall/F-score, point RMSE, 3D box IoU.

Nearest-neighbor queries use a uniform grid hash (exact results, linear build),
box IoU uses seeded Monte-Carlo sampling with a reported standard error.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .geometry import OrientedBox3, box_corners
from .sdf_shapes import extract_mesh_points, tight_bounding_box

DEFAULT_TAU = 0.05
DEFAULT_IOU_SAMPLES = 32 ** 3


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f_score: float
    rmse_sdf: float
    iou: float
    iou_standard_error: float
    associated_point_count: int
    distance_threshold: float

    def __post_init__(self):
        vals = (self.precision, self.recall, self.f_score, self.rmse_sdf,
                self.iou, self.iou_standard_error, self.distance_threshold)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("metric fields must be finite")
        expect = f_score(self.precision, self.recall)
        if abs(self.f_score - expect) > 1e-9:
            raise ValueError(
                f"f_score {self.f_score} inconsistent with precision/recall "
                f"(expected {expect})"
            )

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return MetricsReport(**d)


class GridIndex:
    """Uniform grid hash over a point set for exact nearest-neighbor queries."""

    def __init__(self, points: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.points.shape[0] == 0:
            raise ValueError("empty point set")
        self.cell = float(cell_size)
        self.cells = {}
        keys = np.floor(self.points / self.cell).astype(np.int64)
        for i, k in enumerate(map(tuple, keys)):
            self.cells.setdefault(k, []).append(i)

    def _cell_points(self, key):
        idx = self.cells.get(key)
        return None if idx is None else self.points[idx]

    def has_neighbor_within(self, q: np.ndarray, radius: float) -> bool:
        """True if any indexed point lies within `radius` of q (exact)."""
        reach = int(np.ceil(radius / self.cell))
        kq = np.floor(np.asarray(q, dtype=float) / self.cell).astype(np.int64)
        r2 = radius * radius
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    pts = self._cell_points((kq[0] + dx, kq[1] + dy, kq[2] + dz))
                    if pts is not None and np.any(
                        np.sum((pts - q) ** 2, axis=1) <= r2
                    ):
                        return True
        return False

    def nearest_distance(self, q: np.ndarray) -> float:
        """Exact distance to the nearest indexed point, by expanding cube shells.

        A point in a cell at Chebyshev shell offset m is at least (m-1) * cell
        away, so once best <= ring * cell no farther shell can improve it.
        """
        q = np.asarray(q, dtype=float)
        # Tiny sets (or degenerate cell sizes) are cheaper by brute force,
        # and the shell walk below would be unbounded for a zero-spread cloud.
        if len(self.points) <= 512:
            return float(np.sqrt(np.min(np.sum((self.points - q) ** 2, axis=1))))
        kq = np.floor(q / self.cell).astype(np.int64)
        max_ring = int(np.ceil(np.max(np.abs(self.points - q)) / self.cell)) + 2
        best = np.inf
        for ring in range(max_ring + 1):
            for dx in range(-ring, ring + 1):
                for dy in range(-ring, ring + 1):
                    for dz in range(-ring, ring + 1):
                        if max(abs(dx), abs(dy), abs(dz)) != ring:
                            continue
                        pts = self._cell_points((kq[0] + dx, kq[1] + dy, kq[2] + dz))
                        if pts is None:
                            continue
                        d = np.sqrt(np.min(np.sum((pts - q) ** 2, axis=1)))
                        best = min(best, d)
            if best <= ring * self.cell:
                break
        return float(best)


def precision_recall_fscore(predicted: np.ndarray, ground_truth: np.ndarray,
                            tau: float):
    """Distance-thresholded precision, recall, and their harmonic mean."""
    pred = np.atleast_2d(np.asarray(predicted, dtype=float))
    gt = np.atleast_2d(np.asarray(ground_truth, dtype=float))
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    if tau <= 0:
        raise ValueError("tau must be positive")
    gt_index = GridIndex(gt, tau)
    pred_index = GridIndex(pred, tau)
    p = np.mean([gt_index.has_neighbor_within(q, tau) for q in pred])
    r = np.mean([pred_index.has_neighbor_within(q, tau) for q in gt])
    f = f_score(p, r)
    return float(p), float(r), f


def f_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rmse_sdf(predicted_mesh_points: np.ndarray, ground_truth: np.ndarray) -> float:
    """Root mean squared nearest-neighbor distance from predicted points to GT."""
    pred = np.atleast_2d(np.asarray(predicted_mesh_points, dtype=float))
    gt = np.atleast_2d(np.asarray(ground_truth, dtype=float))
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    # Cell size from the data scale keeps shell expansion short.
    spread = np.max(np.ptp(gt, axis=0))
    cell = max(spread / max(int(round(len(gt) ** (1.0 / 3.0))), 1), 1e-9)
    index = GridIndex(gt, cell)
    d = np.array([index.nearest_distance(q) for q in pred])
    return float(np.sqrt(np.mean(d ** 2)))


def iou_3d(a: OrientedBox3, b: OrientedBox3, resolution: int = DEFAULT_IOU_SAMPLES,
           seed: int = 0):
    """Monte-Carlo IoU of two oriented boxes.

    Uniform samples in the union's axis-aligned hull, classified against both
    boxes. Returns (iou, standard_error); deterministic for a fixed seed.
    """
    if resolution < 32 ** 3:
        raise ValueError("resolution must be at least 32^3 samples")
    corners = np.vstack([box_corners(a), box_corners(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    samples = rng.uniform(lo, hi, size=(int(resolution), 3))
    in_a = a.contains(samples)
    in_b = b.contains(samples)
    n_union = int(np.count_nonzero(in_a | in_b))
    n_inter = int(np.count_nonzero(in_a & in_b))
    if n_union == 0:
        return 0.0, 0.0
    if n_inter == 0:
        return 0.0, 0.0
    iou = n_inter / n_union
    se = float(np.sqrt(iou * (1.0 - iou) / n_union))
    return float(iou), se


def evaluate_run(
    hypothesis,
    ground_truth_points: np.ndarray,
    ground_truth_box: OrientedBox3,
    tau: float = DEFAULT_TAU,
    resolution: int = DEFAULT_IOU_SAMPLES,
    mesh_resolution: int = 48,
    seed: int = 0,
) -> MetricsReport:
    """Full metric suite for one reconstructed object against ground truth."""
    if hypothesis.status != "converged":
        raise ValueError("cannot evaluate a non-converged reconstruction")
    from .geometry import invert

    mesh_obj = extract_mesh_points(hypothesis.code, mesh_resolution)
    mesh_world = invert(hypothesis.pose).apply(mesh_obj)
    p, r, f = precision_recall_fscore(mesh_world, ground_truth_points, tau)
    rmse = rmse_sdf(mesh_world, ground_truth_points)
    box = tight_bounding_box(hypothesis.code, hypothesis.pose)
    iou, se = iou_3d(box, ground_truth_box, resolution, seed=seed)
    return MetricsReport(
        precision=p,
        recall=r,
        f_score=f,
        rmse_sdf=rmse,
        iou=iou,
        iou_standard_error=se,
        associated_point_count=len(hypothesis.associated_point_ids),
        distance_threshold=tau,
    )
