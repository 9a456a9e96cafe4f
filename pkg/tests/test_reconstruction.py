import time

import numpy as np
import pytest

from objslam.geometry import Ray, RigidTransform, compose, invert
from objslam.reconstruction import (
    EnergyWeights,
    InsufficientObservationsError,
    ObjectHypothesis,
    OptimizeOptions,
    RenderObservation,
    optimize_object,
    render_energy,
    sphere_trace,
    surface_energy,
    total_energy,
)
from objslam.sdf_shapes import ShapeCode, extract_mesh_points
from conftest import random_rigid

SPHERE = ShapeCode.sphere()
IDENTITY = RigidTransform.identity()


def sphere_points(n, rng, radius=1.0):
    d = rng.standard_normal((n, 3))
    return radius * d / np.linalg.norm(d, axis=1, keepdims=True)


class TestSurfaceEnergy:
    def test_on_surface_points_zero(self, rng):
        pts = sphere_points(200, rng)
        assert surface_energy(pts, IDENTITY, SPHERE) < 1e-10

    def test_single_offset_point(self):
        # One point 2 m outside the unit sphere: energy = sdf^2 = 4.
        pts = np.array([[3.0, 0.0, 0.0]])
        assert surface_energy(pts, IDENTITY, SPHERE) == pytest.approx(4.0, abs=1e-9)

    def test_true_pose_beats_perturbations(self, rng):
        # Perturbation sweep oracle: the generating pose must score below
        # 100 random perturbed poses.
        code = ShapeCode(np.array([1.4, 0.8, 0.6, 0.8, 0.6]))
        surf = extract_mesh_points(code, 32)
        surf = surf[rng.choice(len(surf), 500, replace=False)]
        true_pose = random_rigid(rng)
        pts_world = invert(true_pose).apply(surf)
        e_true = surface_energy(pts_world, true_pose, code)
        for _ in range(100):
            delta = RigidTransform.from_rotvec(
                rng.normal(0, 0.05, 3), rng.normal(0, 0.05, 3)
            )
            e_pert = surface_energy(pts_world, compose(delta, true_pose), code)
            assert e_true < e_pert

    def test_empty_points_rejected(self):
        with pytest.raises(ValueError):
            surface_energy(np.empty((0, 3)), IDENTITY, SPHERE)

    def test_invariant_under_common_rigid_transform(self, rng):
        code = ShapeCode(np.array([1.2, 0.9, 0.7, 1.0, 0.8]))
        pts = rng.uniform(-2, 2, (50, 3))
        pose = random_rigid(rng)
        g = random_rigid(rng)
        # Moving the world by g and compensating in the pose leaves E unchanged.
        e1 = surface_energy(pts, pose, code)
        e2 = surface_energy(g.apply(pts), compose(pose, invert(g)), code)
        assert e1 == pytest.approx(e2, rel=1e-9)


class TestSphereTraceAndRenderEnergy:
    def test_analytic_ray_sphere_hit(self):
        # Ray from (0,0,-3) toward +z hits the unit sphere at depth 2.
        depth, hit = sphere_trace(SPHERE, np.array([[0.0, 0.0, -3.0]]),
                                  np.array([[0.0, 0.0, 1.0]]))
        assert hit[0]
        assert depth[0] == pytest.approx(2.0, abs=1e-3)

    def test_miss(self):
        _, hit = sphere_trace(SPHERE, np.array([[0.0, 5.0, -3.0]]),
                              np.array([[0.0, 0.0, 1.0]]))
        assert not hit[0]

    def test_depth_match_gives_zero(self):
        obs = [RenderObservation(ray=Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]),
                                 in_mask=True, observed_depth=2.0)]
        assert render_energy(obs, IDENTITY, SPHERE) < 1e-6

    def test_depth_mismatch_quadratic(self):
        obs = [RenderObservation(ray=Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]),
                                 in_mask=True, observed_depth=2.5)]
        assert render_energy(obs, IDENTITY, SPHERE) == pytest.approx(0.25, abs=1e-3)

    def test_clear_exterior_ray_zero(self):
        # Passes 0.5 m clear of the unit sphere: hinge inactive.
        obs = [RenderObservation(ray=Ray([-5.0, 1.5, 0.0], [1.0, 0.0, 0.0]),
                                 in_mask=False)]
        assert render_energy(obs, IDENTITY, SPHERE) == 0.0

    def test_penetrating_exterior_ray_penalized(self):
        obs = [RenderObservation(ray=Ray([-5.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
                                 in_mask=False)]
        assert render_energy(obs, IDENTITY, SPHERE) > 0.0

    def test_shrinking_never_increases_exterior_penalty(self, rng):
        code = ShapeCode(np.array([1.5, 1.0, 0.8, 1.0, 1.0]))
        smaller = ShapeCode(code.z * np.array([0.9, 0.9, 0.9, 1.0, 1.0]))
        for _ in range(20):
            origin = rng.uniform(-4, 4, 3)
            origin = origin / max(np.linalg.norm(origin), 1e-6) * 4.0
            target = rng.uniform(-1.5, 1.5, 3)
            obs = [RenderObservation(ray=Ray(origin, target - origin), in_mask=False)]
            assert render_energy(obs, IDENTITY, smaller) <= \
                render_energy(obs, IDENTITY, code) + 1e-12

    def test_invalid_observation_rejected(self):
        with pytest.raises(ValueError):
            RenderObservation(ray=Ray([0, 0, -3.0], [0, 0, 1.0]),
                              in_mask=False, observed_depth=2.0)
        with pytest.raises(ValueError):
            RenderObservation(ray=Ray([0, 0, -3.0], [0, 0, 1.0]),
                              in_mask=True, observed_depth=-1.0)


class TestTotalEnergy:
    def test_centered_code_regularizer_zero(self):
        w = EnergyWeights(0.0, 0.0, 1.0)
        total, parts = total_energy(np.array([[2.0, 0.0, 0.0]]), [],
                                    IDENTITY, ShapeCode.centered(), w)
        assert total == pytest.approx(0.0, abs=1e-12)

    def test_weight_selection_reduces_to_surface(self, rng):
        pts = rng.uniform(-2, 2, (30, 3))
        w = EnergyWeights(1.0, 0.0, 0.0)
        total, _ = total_energy(pts, [], IDENTITY, SPHERE, w)
        assert total == pytest.approx(surface_energy(pts, IDENTITY, SPHERE), rel=1e-12)

    def test_recomposition(self, rng):
        pts = rng.uniform(-2, 2, (30, 3))
        obs = [RenderObservation(ray=Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]),
                                 in_mask=True, observed_depth=2.1)]
        code = ShapeCode(np.array([1.1, 0.9, 1.0, 0.8, 1.2]))
        w = EnergyWeights(1.0, 1.0, 0.1)
        total, parts = total_energy(pts, obs, IDENTITY, code, w)
        manual = (1.0 * surface_energy(pts, IDENTITY, code)
                  + 1.0 * render_energy(obs, IDENTITY, code)
                  + 0.1 * float(np.sum(code.normalized() ** 2)))
        assert total == pytest.approx(manual, abs=1e-12)

    def test_linear_in_weights(self, rng):
        pts = rng.uniform(-2, 2, (30, 3))
        w1 = EnergyWeights(1.0, 0.0, 0.3)
        w2 = EnergyWeights(2.0, 0.0, 0.3)
        code = ShapeCode(np.array([1.1, 0.9, 1.0, 0.8, 1.2]))
        t1, p1 = total_energy(pts, [], IDENTITY, code, w1)
        t2, p2 = total_energy(pts, [], IDENTITY, code, w2)
        surf1, _, reg1 = p1
        surf2, _, reg2 = p2
        assert surf2 == pytest.approx(2.0 * surf1, rel=1e-12)
        assert reg2 == pytest.approx(reg1, rel=1e-12)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            EnergyWeights(-1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            EnergyWeights(0.0, 0.0, 0.0)


class TestOptimizeObject:
    def test_fixed_point_at_ground_truth(self, rng):
        pts = sphere_points(100, rng)
        hyp = ObjectHypothesis(pose=IDENTITY, code=SPHERE,
                               associated_point_ids=set(range(100)),
                               status="reconstructing")
        out, record = optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 0.0),
                                      OptimizeOptions())
        assert len(record.rows) <= 3
        assert np.allclose(out.code.z, SPHERE.z, atol=1e-6)
        assert np.linalg.norm(out.pose.translation) < 1e-6

    def test_recovers_unit_sphere_from_inflated_start(self, rng):
        pts = sphere_points(200, rng)
        hyp = ObjectHypothesis(
            pose=IDENTITY,
            code=ShapeCode(np.array([1.5, 1.5, 1.5, 1.0, 1.0])),
            associated_point_ids=set(range(200)),
            status="reconstructing",
        )
        out, record = optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 1e-3),
                                      OptimizeOptions())
        assert out.status == "converged"
        assert np.max(np.abs(out.code.half_axes - 1.0)) < 0.02

    def test_default_regularizer_bias_is_a_true_minimum(self, rng):
        # At lambda_c = 0.01 the exponent directions of the code are cheap
        # enough for the regularizer to pull the fit a few percent off the
        # generating sphere. That endpoint is a genuine minimum: its total
        # energy is below the energy at the generating code, so the optimizer
        # is not at fault and the bias shrinks with the weight (tested above).
        pts = sphere_points(200, rng)
        w = EnergyWeights(1.0, 0.0, 0.01)
        hyp = ObjectHypothesis(pose=IDENTITY,
                               code=ShapeCode(np.array([1.5, 1.5, 1.5, 1.0, 1.0])),
                               associated_point_ids=set(range(200)),
                               status="reconstructing")
        out, _ = optimize_object(hyp, pts, [], w, OptimizeOptions())
        e_found, _ = total_energy(pts, [], out.pose, out.code, w)
        e_truth, _ = total_energy(pts, [], IDENTITY, SPHERE, w)
        assert e_found <= e_truth + 1e-12
        assert np.max(np.abs(out.code.half_axes - 1.0)) < 0.1

    def test_hemisphere_coverage_worse_than_full(self, rng):
        # One-sided observations: fitting only the +x hemisphere must give a
        # strictly larger code error than the full-coverage fit.
        full = sphere_points(400, rng)
        hemi = full[full[:, 0] > 0.0]
        start = ShapeCode(np.array([1.5, 1.5, 1.5, 1.0, 1.0]))
        results = {}
        for name, pts in (("full", full), ("hemi", hemi)):
            hyp = ObjectHypothesis(pose=IDENTITY, code=start,
                                   associated_point_ids=set(range(len(pts))),
                                   status="reconstructing")
            out, _ = optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 0.01),
                                     OptimizeOptions())
            results[name] = np.linalg.norm(out.code.z - SPHERE.z) \
                + np.linalg.norm(out.pose.translation)
        assert results["hemi"] > results["full"]

    def test_energy_non_increasing(self, rng):
        pts = sphere_points(150, rng) + rng.normal(0, 0.01, (150, 3))
        hyp = ObjectHypothesis(
            pose=RigidTransform.from_rotvec([0.02, -0.01, 0.03], [0.05, -0.04, 0.02]),
            code=ShapeCode(np.array([1.3, 1.2, 1.4, 0.9, 1.1])),
            associated_point_ids=set(range(150)),
            status="reconstructing",
        )
        _, record = optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 0.001),
                                    OptimizeOptions())
        totals = [row[4] for row in record.rows]
        assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))

    def test_regularizer_only_converges_to_centered_code(self, rng):
        pts = sphere_points(50, rng)
        hyp = ObjectHypothesis(pose=IDENTITY,
                               code=ShapeCode(np.array([4.0, 0.3, 2.0, 0.4, 1.8])),
                               associated_point_ids=set(range(50)),
                               status="reconstructing")
        out, _ = optimize_object(hyp, pts, [], EnergyWeights(0.0, 0.0, 1.0),
                                 OptimizeOptions())
        assert np.allclose(out.code.z, ShapeCode.centered().z, atol=1e-3)

    def test_insufficient_points(self, rng):
        pts = sphere_points(10, rng)
        hyp = ObjectHypothesis(pose=IDENTITY, code=SPHERE,
                               associated_point_ids=set(range(10)),
                               status="reconstructing")
        with pytest.raises(InsufficientObservationsError):
            optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 0.0),
                            OptimizeOptions())
        assert hyp.status == "pending"

    def test_perturbed_superellipsoid_recovery(self, rng):
        # Known ground truth by construction; pose off by 0.1 m / 5 deg and
        # code off by 20%; see also the acceptance suite which times this.
        code = ShapeCode(np.array([1.5, 1.0, 0.6, 0.8, 0.6]))
        surf = extract_mesh_points(code, 32)
        pts = surf[rng.choice(len(surf), 500, replace=False)]
        start_code = ShapeCode(np.clip(code.z * 1.2, None, 2.0))
        axis = rng.standard_normal(3)
        axis = axis / np.linalg.norm(axis) * np.deg2rad(5.0)
        t_dir = rng.standard_normal(3)
        t_dir = t_dir / np.linalg.norm(t_dir) * 0.1
        start_pose = compose(RigidTransform.from_rotvec(axis, t_dir), IDENTITY)
        hyp = ObjectHypothesis(pose=start_pose, code=start_code,
                               associated_point_ids=set(range(len(pts))),
                               status="reconstructing")
        t0 = time.time()
        out, record = optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 1e-4),
                                      OptimizeOptions())
        assert time.time() - t0 < 10.0
        assert out.status == "converged"
        assert np.max(np.abs(out.code.half_axes - code.half_axes)
                      / code.half_axes) < 0.02
        assert np.linalg.norm(out.pose.translation) < 0.01

    def test_convergence_record_csv(self, rng, tmp_path):
        pts = sphere_points(60, rng)
        hyp = ObjectHypothesis(pose=IDENTITY,
                               code=ShapeCode(np.array([1.2, 1.2, 1.2, 1.0, 1.0])),
                               associated_point_ids=set(range(60)),
                               status="reconstructing")
        _, record = optimize_object(hyp, pts, [], EnergyWeights(1.0, 0.0, 0.01),
                                    OptimizeOptions())
        path = tmp_path / "conv.csv"
        record.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,e_surf,e_rend,e_reg,total"
        assert len(lines) == len(record.rows) + 1
