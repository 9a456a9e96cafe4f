"""Analytic latent-code shape family: superellipsoids as a signed-distance decoder.

A 5-vector shape code (half axes a, b, c and exponents e1, e2) selects one
member of the superellipsoid family. The decoder returns a pseudo signed
distance: exact for spheres, a first-order radial approximation elsewhere.
The family is star-shaped from the origin, which makes mesh-point extraction
by radial bisection exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox3, RigidTransform

# Component bounds for the shape code: half axes in meters, exponents unitless.
CODE_LOW = np.array([0.05, 0.05, 0.05, 0.2, 0.2])
CODE_HIGH = np.array([5.0, 5.0, 5.0, 2.0, 2.0])
CODE_MID = 0.5 * (CODE_LOW + CODE_HIGH)
CODE_HALF_RANGE = 0.5 * (CODE_HIGH - CODE_LOW)

_EPS = 1e-12


class ShapeCodeError(ValueError):
    """Shape code outside its declared bounds."""


class DegenerateShapeError(ValueError):
    """Shape too degenerate to yield a usable surface sample set."""


@dataclass(frozen=True)
class ShapeCode:
    """Latent code z = (a, b, c, e1, e2) for the superellipsoid family."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(5)
        if not np.all(np.isfinite(z)):
            raise ShapeCodeError("shape code must be finite")
        if np.any(z < CODE_LOW - 1e-12) or np.any(z > CODE_HIGH + 1e-12):
            raise ShapeCodeError(
                f"shape code {z} outside bounds [{CODE_LOW}, {CODE_HIGH}]"
            )
        object.__setattr__(self, "z", np.clip(z, CODE_LOW, CODE_HIGH))

    @staticmethod
    def sphere(radius: float = 1.0) -> "ShapeCode":
        return ShapeCode(np.array([radius, radius, radius, 1.0, 1.0]))

    @staticmethod
    def centered() -> "ShapeCode":
        return ShapeCode(CODE_MID.copy())

    @property
    def half_axes(self) -> np.ndarray:
        return self.z[:3]

    @property
    def exponents(self) -> np.ndarray:
        return self.z[3:]

    def normalized(self) -> np.ndarray:
        """Code mapped componentwise to [-1, 1] over its bounds."""
        return (self.z - CODE_MID) / CODE_HALF_RANGE


@dataclass(frozen=True)
class SdfSample:
    point: np.ndarray
    value: float
    gradient_point: np.ndarray
    gradient_code: np.ndarray


def clamp_code(z: np.ndarray) -> ShapeCode:
    """Project a raw 5-vector onto the code box (used by optimizers)."""
    return ShapeCode(np.clip(np.asarray(z, dtype=float).reshape(5), CODE_LOW, CODE_HIGH))


def inside_outside(code: ShapeCode, points: np.ndarray) -> np.ndarray:
    """Superellipsoid implicit function F: < 1 inside, 1 on the surface, > 1 outside.

    F = (|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1) + |z/c|^(2/e1),
    homogeneous of degree 2/e1 under radial scaling.
    """
    a, b, c, e1, e2 = code.z
    p = np.atleast_2d(np.asarray(points, dtype=float))
    x = np.abs(p[:, 0]) / a
    y = np.abs(p[:, 1]) / b
    zc = np.abs(p[:, 2]) / c
    xy = (x ** (2.0 / e2) + y ** (2.0 / e2)) ** (e2 / e1)
    return xy + zc ** (2.0 / e1)


def sdf_eval(code: ShapeCode, points: np.ndarray):
    """Pseudo signed distance: negative inside, positive outside, zero on the surface.

    Uses the radial scaling distance r(p) * (1 - F(p)^(-e1/2)), which is exact
    for spheres and a first-order approximation for other family members.
    Accepts a single point (3,) or a batch (N, 3).
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    r = np.linalg.norm(p2, axis=1)
    f = inside_outside(code, p2)
    e1 = code.z[3]
    # At the center r = 0 and F = 0; the distance there is the smallest half axis.
    val = np.where(
        r > _EPS,
        r * (1.0 - np.maximum(f, _EPS) ** (-e1 / 2.0)),
        -np.min(code.half_axes),
    )
    return float(val[0]) if single else val


def sdf_gradient(code: ShapeCode, point: np.ndarray):
    """Central finite-difference gradients w.r.t. the point and the code.

    Step h = 1e-5 * max(1, |coordinate|) per component. Code steps are clipped
    so perturbed codes stay inside the bounds (one-sided at the boundary).
    """
    p = np.asarray(point, dtype=float).reshape(3)
    grad_p = np.empty(3)
    for i in range(3):
        h = 1e-5 * max(1.0, abs(p[i]))
        dp = np.zeros(3)
        dp[i] = h
        grad_p[i] = (sdf_eval(code, p + dp) - sdf_eval(code, p - dp)) / (2.0 * h)

    z = code.z
    grad_z = np.empty(5)
    for i in range(5):
        h = 1e-5 * max(1.0, abs(z[i]))
        hi = min(h, CODE_HIGH[i] - z[i])
        lo = min(h, z[i] - CODE_LOW[i])
        if hi + lo < _EPS:
            grad_z[i] = 0.0
            continue
        zp, zm = z.copy(), z.copy()
        zp[i] += hi
        zm[i] -= lo
        grad_z[i] = (sdf_eval(ShapeCode(zp), p) - sdf_eval(ShapeCode(zm), p)) / (hi + lo)
    return grad_p, grad_z


def sdf_gradients_points(code: ShapeCode, points: np.ndarray) -> np.ndarray:
    """Vectorized point-gradient for a batch (N, 3) -> (N, 3)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    grads = np.empty_like(p)
    for i in range(3):
        h = 1e-5 * np.maximum(1.0, np.abs(p[:, i]))
        dp = np.zeros_like(p)
        dp[:, i] = h
        grads[:, i] = (sdf_eval(code, p + dp) - sdf_eval(code, p - dp)) / (2.0 * h)
    return grads


def sdf_gradients_code(code: ShapeCode, points: np.ndarray) -> np.ndarray:
    """Vectorized code-gradient for a batch (N, 3) -> (N, 5)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = code.z
    grads = np.empty((p.shape[0], 5))
    for i in range(5):
        h = 1e-5 * max(1.0, abs(z[i]))
        hi = min(h, CODE_HIGH[i] - z[i])
        lo = min(h, z[i] - CODE_LOW[i])
        if hi + lo < _EPS:
            grads[:, i] = 0.0
            continue
        zp, zm = z.copy(), z.copy()
        zp[i] += hi
        zm[i] -= lo
        grads[:, i] = (sdf_eval(ShapeCode(zp), p) - sdf_eval(ShapeCode(zm), p)) / (hi + lo)
    return grads


def sdf_sample(code: ShapeCode, point: np.ndarray) -> SdfSample:
    gp, gz = sdf_gradient(code, point)
    return SdfSample(
        point=np.asarray(point, dtype=float).reshape(3),
        value=sdf_eval(code, point),
        gradient_point=gp,
        gradient_code=gz,
    )


def _sphere_directions(resolution: int) -> np.ndarray:
    """Deterministic resolution^2 grid of unit directions (polar x azimuth)."""
    # Offset grids avoid the poles and duplicate seams.
    theta = (np.arange(resolution) + 0.5) * np.pi / resolution
    phi = (np.arange(resolution) + 0.5) * 2.0 * np.pi / resolution
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    st = np.sin(th)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)
    return dirs.reshape(-1, 3)


def extract_mesh_points(code: ShapeCode, resolution: int) -> np.ndarray:
    """Sample the zero level set by radial bisection along resolution^2 directions.

    The family is star-shaped from its center, so each ray crosses the surface
    exactly once. Deterministic for fixed inputs; returns an (N, 3) array.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    dirs = _sphere_directions(int(resolution))
    max_axis = float(np.max(code.half_axes))
    lo = np.zeros(len(dirs))
    hi = np.full(len(dirs), 2.0 * np.sqrt(3.0) * max_axis)
    # sdf(0) < 0 and sdf(hi * d) > 0; bisect the radius until the bracket is tight.
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        vals = sdf_eval(code, dirs * mid[:, None])
        inside = vals < 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    radius = 0.5 * (lo + hi)
    points = dirs * radius[:, None]
    ok = np.abs(sdf_eval(code, points)) < 1e-3 * max_axis
    points = points[ok]
    if len(points) < 100:
        raise DegenerateShapeError(
            f"shape yielded only {len(points)} usable surface points"
        )
    return points


def tight_bounding_box(code: ShapeCode, pose: RigidTransform) -> OrientedBox3:
    """Tight box of the shape (half extents = half axes) posed in the world.

    `pose` maps world to object; the box lives in the world frame.
    """
    from .geometry import invert

    obj_to_world = invert(pose)
    return OrientedBox3(
        center=obj_to_world.translation,
        half_extents=code.half_axes.copy(),
        quat=obj_to_world.quat,
    )
