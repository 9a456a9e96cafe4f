"""Object reconstruction energy and the damped Gauss-Newton pose/code fitter.

The total energy combines three terms: surface consistency (squared SDF of the
associated map points), a ray-based rendering term (depth agreement inside the
segmentation mask, a penetration hinge outside it), and a regularizer on the
normalized shape code. Pose and code are optimized jointly with Levenberg
damping; accepted steps never increase the energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, Ray, compose, exp_se3, invert, skew
from .sdf_shapes import (
    CODE_HALF_RANGE,
    ShapeCode,
    clamp_code,
    sdf_eval,
    sdf_gradients_code,
    sdf_gradients_points,
)

# Sphere tracing constants.
TRACE_MAX_STEPS = 128
TRACE_HIT_EPS = 1e-4
TRACE_MAX_LENGTH = 20.0
# Hinge margin for rays outside the segmentation mask.
EXTERIOR_MARGIN = 0.02
_RAY_MIN_SAMPLES = 64


class InsufficientObservationsError(ValueError):
    """Too few associated points to attempt reconstruction."""


class DivergedError(RuntimeError):
    """Optimization produced a non-finite energy."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class EnergyWeights:
    lambda_s: float = 1.0
    lambda_r: float = 0.5
    lambda_c: float = 0.01

    def __post_init__(self):
        w = (self.lambda_s, self.lambda_r, self.lambda_c)
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError("weights must be non-negative with at least one positive")


@dataclass
class ObjectHypothesis:
    """An object under reconstruction: pose (world->object), code, evidence."""

    pose: RigidTransform
    code: ShapeCode
    associated_point_ids: set = field(default_factory=set)
    status: str = "pending"


@dataclass(frozen=True)
class RenderObservation:
    """One camera ray with its segmentation/depth evidence.

    observed_depth present implies in_mask; mask-exterior rays carry no depth.
    """

    ray: Ray
    in_mask: bool
    observed_depth: float | None = None

    def __post_init__(self):
        if self.observed_depth is not None:
            if not self.in_mask:
                raise ValueError("depth observation requires in_mask")
            if self.observed_depth <= 0:
                raise ValueError("observed depth must be positive")


@dataclass
class ConvergenceRecord:
    """Per-iteration energy log: (iteration, E_surf, E_rend, E_reg, total)."""

    rows: list = field(default_factory=list)
    converged: bool = False
    termination: str = ""

    def append(self, iteration, e_surf, e_rend, e_reg):
        self.rows.append(
            (int(iteration), float(e_surf), float(e_rend), float(e_reg),
             float(e_surf + e_rend + e_reg))
        )

    @property
    def energies(self):
        return [r[4] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("iteration,e_surf,e_rend,e_reg,total\n")
            for it, es, er, ec, tot in self.rows:
                f.write(f"{it},{es:.9g},{er:.9g},{ec:.9g},{tot:.9g}\n")


@dataclass(frozen=True)
class OptimizeOptions:
    max_iterations: int = 200
    energy_rel_tol: float = 1e-6
    gradient_tol: float = 1e-8
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    min_points: int = 20


def surface_energy(points: np.ndarray, pose: RigidTransform, code: ShapeCode) -> float:
    """Mean squared SDF of world points mapped into the object frame."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[0] == 0:
        raise ValueError("surface_energy requires at least one point")
    vals = sdf_eval(code, pose.apply(p))
    return float(np.mean(vals ** 2))


def sphere_trace(code: ShapeCode, origins: np.ndarray, directions: np.ndarray):
    """Sphere-trace rays in the object frame.

    Returns (depths, hit_mask). Step length equals the SDF value; a hit is
    declared when sdf < TRACE_HIT_EPS, a miss past TRACE_MAX_LENGTH.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    n = o.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        pts = o[idx] + t[idx, None] * d[idx]
        s = sdf_eval(code, pts)
        newly_hit = s < TRACE_HIT_EPS
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        adv = idx[~newly_hit]
        t[adv] += s[~newly_hit]
        overrun = t[adv] > TRACE_MAX_LENGTH
        active[adv[overrun]] = False
    return t, hit


def _min_sdf_along_rays(code: ShapeCode, origins: np.ndarray, directions: np.ndarray):
    """Minimum SDF along each ray, restricted to the shape's bounding sphere.

    Rays whose closest approach to the origin exceeds the bounding radius get
    the (conservative, exact-enough) lower bound closest_approach - radius,
    which is positive there and never activates the hinge incorrectly.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    radius = float(np.linalg.norm(code.half_axes))
    # Closest approach of each ray to the object center (t >= 0).
    t0 = np.maximum(0.0, -np.einsum("ij,ij->i", o, d))
    closest = np.linalg.norm(o + t0[:, None] * d, axis=1)
    min_sdf = closest - radius
    near = closest < radius + 10.0 * EXTERIOR_MARGIN
    if np.any(near):
        oi, di = o[near], d[near]
        t0n = t0[near]
        half_span = np.sqrt(
            np.maximum(0.0, (radius + 10.0 * EXTERIOR_MARGIN) ** 2
                       - np.linalg.norm(oi + t0n[:, None] * di, axis=1) ** 2)
        ) + 10.0 * EXTERIOR_MARGIN
        ts = np.linspace(-1.0, 1.0, _RAY_MIN_SAMPLES)
        samples = (t0n[:, None] + half_span[:, None] * ts[None, :])
        samples = np.maximum(samples, 0.0)
        pts = oi[:, None, :] + samples[:, :, None] * di[:, None, :]
        vals = sdf_eval(code, pts.reshape(-1, 3)).reshape(len(oi), -1)
        min_sdf[near] = np.min(vals, axis=1)
    return min_sdf


def _render_residuals(observations, pose: RigidTransform, code: ShapeCode) -> np.ndarray:
    """Per-ray residuals; the mean of their squares is the rendering energy."""
    if len(observations) == 0:
        raise ValueError("render_energy requires at least one observation")
    origins = np.array([obs.ray.origin for obs in observations])
    dirs = np.array([obs.ray.direction for obs in observations])
    # Work in the object frame; directions stay unit under a rigid map.
    o_obj = pose.apply(origins)
    d_obj = pose.rotation.apply(dirs)

    res = np.zeros(len(observations))
    depth_idx = [i for i, obs in enumerate(observations)
                 if obs.in_mask and obs.observed_depth is not None]
    sil_idx = [i for i, obs in enumerate(observations)
               if obs.in_mask and obs.observed_depth is None]
    ext_idx = [i for i, obs in enumerate(observations) if not obs.in_mask]

    if depth_idx:
        t, hit = sphere_trace(code, o_obj[depth_idx], d_obj[depth_idx])
        depths = np.array([observations[i].observed_depth for i in depth_idx])
        # Missed depth rays pay the full observed depth (strong pull to cover).
        res[depth_idx] = np.where(hit, t - depths, depths)
    if sil_idx:
        m = _min_sdf_along_rays(code, o_obj[sil_idx], d_obj[sil_idx])
        res[sil_idx] = np.maximum(0.0, m)
    if ext_idx:
        m = _min_sdf_along_rays(code, o_obj[ext_idx], d_obj[ext_idx])
        res[ext_idx] = np.maximum(0.0, EXTERIOR_MARGIN - m)
    return res


def render_energy(observations, pose: RigidTransform, code: ShapeCode) -> float:
    """Mean squared ray residual: depth misfit in-mask, penetration hinge outside."""
    res = _render_residuals(observations, pose, code)
    return float(np.mean(res ** 2))


def regularizer_energy(code: ShapeCode) -> float:
    zn = code.normalized()
    return float(np.dot(zn, zn))


def total_energy(points, observations, pose, code, weights: EnergyWeights):
    """Weighted sum of the three terms; also returns the per-term breakdown."""
    e_surf = surface_energy(points, pose, code) if weights.lambda_s > 0 else 0.0
    e_rend = (
        render_energy(observations, pose, code)
        if (weights.lambda_r > 0 and observations is not None and len(observations) > 0)
        else 0.0
    )
    e_reg = regularizer_energy(code)
    total = (
        weights.lambda_s * e_surf + weights.lambda_r * e_rend + weights.lambda_c * e_reg
    )
    return total, (weights.lambda_s * e_surf, weights.lambda_r * e_rend,
                   weights.lambda_c * e_reg)


def _residual_vector(points, observations, pose, code, weights):
    """Stacked residuals whose squared norm equals the total energy."""
    parts = []
    if weights.lambda_s > 0 and points is not None and len(points) > 0:
        p = np.atleast_2d(points)
        vals = sdf_eval(code, pose.apply(p))
        parts.append(np.sqrt(weights.lambda_s / len(p)) * vals)
    if weights.lambda_r > 0 and observations is not None and len(observations) > 0:
        r = _render_residuals(observations, pose, code)
        parts.append(np.sqrt(weights.lambda_r / len(r)) * r)
    parts.append(np.sqrt(weights.lambda_c) * code.normalized())
    return np.concatenate(parts)


def _jacobian(points, observations, pose, code, weights):
    """Jacobian of the stacked residuals w.r.t. (pose increment 6, code 5).

    Surface rows are analytic through the SDF gradients; rendering rows use
    central finite differences over the 11 parameters.
    """
    n_surf = len(points) if (weights.lambda_s > 0 and points is not None) else 0
    n_rend = len(observations) if (
        weights.lambda_r > 0 and observations is not None and len(observations) > 0
    ) else 0
    rows = n_surf + n_rend + 5
    jac = np.zeros((rows, 11))

    if n_surf:
        p = np.atleast_2d(points)
        p_obj = pose.apply(p)
        g_pt = sdf_gradients_points(code, p_obj)
        g_cd = sdf_gradients_code(code, p_obj)
        scale = np.sqrt(weights.lambda_s / n_surf)
        # Left-increment pose perturbation: d p_obj / d omega = -[p_obj]x, d/dt = I.
        for i in range(n_surf):
            jac[i, 0:3] = scale * (g_pt[i] @ (-skew(p_obj[i])))
            jac[i, 3:6] = scale * g_pt[i]
        jac[:n_surf, 6:11] = scale * g_cd

    if n_rend:
        scale = np.sqrt(weights.lambda_r / n_rend)
        h = 1e-6

        def rend_res(xi, dz):
            pz = compose(exp_se3(xi), pose)
            cz = clamp_code(code.z + dz)
            return _render_residuals(observations, pz, cz)

        base_rows = slice(n_surf, n_surf + n_rend)
        for j in range(6):
            xi = np.zeros(6)
            xi[j] = h
            rp = rend_res(xi, np.zeros(5))
            xi[j] = -h
            rm = rend_res(xi, np.zeros(5))
            jac[base_rows, j] = scale * (rp - rm) / (2.0 * h)
        for j in range(5):
            dz = np.zeros(5)
            dz[j] = h
            rp = rend_res(np.zeros(6), dz)
            dz[j] = -h
            rm = rend_res(np.zeros(6), dz)
            jac[base_rows, 6 + j] = scale * (rp - rm) / (2.0 * h)

    jac[-5:, 6:11] = np.sqrt(weights.lambda_c) * np.diag(1.0 / CODE_HALF_RANGE)
    return jac


def optimize_object(
    hypothesis: ObjectHypothesis,
    points,
    observations,
    weights: EnergyWeights,
    options: OptimizeOptions = OptimizeOptions(),
):
    """Jointly optimize pose and code by damped Gauss-Newton.

    Pose updates are 6-vector increments (axis-angle + translation) composed on
    the left; the code is clamped to its bounds after every step (projected
    gradient). Returns (updated hypothesis, ConvergenceRecord).
    """
    if hypothesis.status != "reconstructing":
        raise ValueError("hypothesis must be in 'reconstructing' status")
    pts = np.atleast_2d(np.asarray(points, dtype=float)) if points is not None else None
    n_pts = 0 if pts is None else pts.shape[0]
    if weights.lambda_s > 0 and n_pts < options.min_points:
        hypothesis.status = "pending"
        raise InsufficientObservationsError(
            f"insufficient observations: {n_pts} < {options.min_points}"
        )

    pose, code = hypothesis.pose, hypothesis.code
    record = ConvergenceRecord()
    damping = options.initial_damping

    energy, terms = total_energy(pts, observations, pose, code, weights)
    if not np.isfinite(energy):
        hypothesis.status = "failed"
        raise DivergedError("diverged: non-finite initial energy", hypothesis)
    record.append(0, *terms)

    for it in range(1, options.max_iterations + 1):
        r = _residual_vector(pts, observations, pose, code, weights)
        jac = _jacobian(pts, observations, pose, code, weights)
        grad = jac.T @ r
        if np.linalg.norm(grad) < options.gradient_tol:
            record.converged = True
            record.termination = "gradient"
            break

        h = jac.T @ jac
        accepted = False
        for _ in range(12):
            try:
                step = np.linalg.solve(h + damping * np.eye(11), -grad)
            except np.linalg.LinAlgError:
                damping *= options.damping_up
                continue
            new_pose = compose(exp_se3(step[:6]), pose)
            new_code = clamp_code(code.z + step[6:])
            new_energy, new_terms = total_energy(pts, observations, new_pose,
                                                 new_code, weights)
            if np.isfinite(new_energy) and new_energy <= energy:
                accepted = True
                break
            damping *= options.damping_up
        if not accepted:
            record.converged = True
            record.termination = "no_improving_step"
            break
        if not np.isfinite(new_energy):
            hypothesis.status = "failed"
            raise DivergedError("diverged: non-finite energy", hypothesis)

        rel_drop = (energy - new_energy) / max(energy, 1e-30)
        pose, code, energy, terms = new_pose, new_code, new_energy, new_terms
        damping = max(damping * options.damping_down, 1e-12)
        record.append(it, *terms)
        if rel_drop < options.energy_rel_tol:
            record.converged = True
            record.termination = "energy"
            break
    else:
        record.termination = "max_iterations"

    updated = ObjectHypothesis(
        pose=pose,
        code=code,
        associated_point_ids=set(hypothesis.associated_point_ids),
        status="converged",
    )
    return updated, record
