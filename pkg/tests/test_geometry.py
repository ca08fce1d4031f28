"""Camera model, similarity fitting, and error-metric tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitealign.errors import BehindCamera, DegenerateConfiguration, NoConvergence, ValidationError
from sitealign.geometry import (
    ErrorTriple,
    Intrinsics,
    Pose,
    camera_errors,
    distort_normalized,
    fit_similarity,
    normalize_rotvec,
    pixel_ray,
    project,
    project_many,
    rotvec_to_matrix,
    SimilarityTransform,
    undistort,
    undistorted_pixel,
)
from sitealign.registration import Camera


class TestProject:
    def test_principal_point_projection(self):
        intr = Intrinsics(100.0, 0.0, 0.0, 640, 480)
        px = project(np.array([0.0, 0.0, 5.0]), Pose.identity(), intr)
        assert np.allclose(px, [320.0, 240.0])

    def test_distortion_polynomial_at_half_radius(self):
        # direct evaluation: r' = r (1 + k1 r^2) at r = 0.5, k1 = 0.1
        xy = np.array([0.5, 0.0])
        out = distort_normalized(xy, 0.1, 0.0)
        assert np.isclose(np.linalg.norm(out), 0.5 * (1 + 0.1 * 0.25))
        assert np.isclose(np.linalg.norm(out), 0.5125)

    def test_behind_camera(self):
        intr = Intrinsics(100.0, 0.0, 0.0, 640, 480)
        with pytest.raises(BehindCamera):
            project(np.array([0.0, 0.0, -1.0]), Pose.identity(), intr)

    def test_scale_invariance_along_ray(self):
        intr = Intrinsics(120.0, 0.0, 0.0, 640, 480)
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.normal(size=3)
            p[2] = abs(p[2]) + 0.5
            a = project(p, Pose.identity(), intr)
            b = project(p * rng.uniform(0.1, 10.0), Pose.identity(), intr)
            assert np.allclose(a, b, atol=1e-9)

    def test_axes_orientation(self):
        # +x right, +y down, origin top-left
        intr = Intrinsics(100.0, 0.0, 0.0, 640, 480)
        right = project(np.array([1.0, 0.0, 5.0]), Pose.identity(), intr)
        down = project(np.array([0.0, 1.0, 5.0]), Pose.identity(), intr)
        assert right[0] > 320 and np.isclose(right[1], 240)
        assert down[1] > 240 and np.isclose(down[0], 320)


class TestUndistort:
    def test_zero_distortion_is_pinhole(self):
        intr = Intrinsics(100.0, 0.0, 0.0, 640, 480)
        xy = undistort(np.array([420.0, 290.0]), intr)
        assert np.allclose(xy, [1.0, 0.5])

    def test_round_trip(self):
        intr = Intrinsics(400.0, 0.1, -0.02, 640, 480)
        rng = np.random.default_rng(2)
        for _ in range(50):
            px = rng.uniform([0, 0], [640, 480])
            xy = undistort(px, intr)
            back = intr.focal * distort_normalized(xy, intr.k1, intr.k2) + intr.principal_point
            assert np.linalg.norm(back - px) < 1e-6

    def test_non_invertible_fold(self):
        # strong negative k1 folds the polynomial before the image corner:
        # g'(r) = 1 + 3 k1 r^2 < 0 at the corner radius
        intr = Intrinsics(300.0, -0.5, 0.0, 640, 480)
        corner_r = np.linalg.norm([320, 240]) / 300.0
        assert 1 + 3 * (-0.5) * corner_r**2 < 0
        with pytest.raises(NoConvergence):
            undistort(np.array([0.0, 0.0]), intr)

    def test_bounds_check(self):
        intr = Intrinsics(400.0, 0.1, 0.0, 640, 480)
        with pytest.raises(ValidationError):
            undistort(np.array([5000.0, 240.0]), intr)


class TestFitSimilarity:
    def test_identity(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(10, 3))
        sim = fit_similarity(pts, pts)
        assert np.isclose(sim.scale, 1.0)
        assert np.allclose(sim.rotvec, 0.0, atol=1e-12)
        assert np.allclose(sim.t, 0.0, atol=1e-12)

    def test_recover_scaled_rotation(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(12, 3))
        R = rotvec_to_matrix(np.array([0.0, 0.0, np.pi / 2]))
        dst = 2.0 * pts @ R.T
        sim = fit_similarity(pts, dst)
        assert np.isclose(sim.scale, 2.0, atol=1e-9)
        assert np.allclose(sim.apply(pts), dst, atol=1e-9)
        assert sim.residual_rms < 1e-9

    def test_two_points_degenerate(self):
        with pytest.raises(DegenerateConfiguration):
            fit_similarity(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_degenerate(self):
        src = np.outer(np.arange(5, dtype=float), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            fit_similarity(src, src)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_apply_then_fit_recovers(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(8, 3)) * rng.uniform(0.5, 5.0)
        if np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)[1] < 1e-6:
            return  # nearly collinear draw
        truth = SimilarityTransform(
            scale=rng.uniform(0.2, 5.0),
            rotvec=rng.normal(size=3),
            t=rng.normal(size=3) * 10,
        )
        sim = fit_similarity(pts, truth.apply(pts))
        assert sim.residual_rms < 1e-8
        assert np.isclose(sim.scale, truth.scale, rtol=1e-9)

    def test_thousand_random_trials_residual(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            pts = rng.normal(size=(6, 3))
            if np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)[1] < 1e-3:
                continue
            truth = SimilarityTransform(
                scale=rng.uniform(0.3, 3.0), rotvec=rng.normal(size=3), t=rng.normal(size=3)
            )
            sim = fit_similarity(pts, truth.apply(pts))
            worst = max(worst, sim.residual_rms)
        assert worst < 1e-8

    def test_inverse_round_trip(self):
        sim = SimilarityTransform(scale=2.5, rotvec=np.array([0.3, -0.2, 0.9]), t=np.array([1, 2, 3.0]))
        pts = np.random.default_rng(8).normal(size=(20, 3))
        assert np.allclose(sim.inverse().apply(sim.apply(pts)), pts, atol=1e-9)


class TestPose:
    def test_center_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pose = Pose(rng.normal(size=3), rng.normal(size=3))
            # world -> camera of the center is the origin
            assert np.allclose(pose.apply(pose.center), 0.0, atol=1e-9)

    def test_rotvec_normalized_range(self):
        v = normalize_rotvec(np.array([0.0, 0.0, 3.5 * np.pi]))
        assert np.linalg.norm(v) <= np.pi + 1e-12
        assert np.allclose(
            rotvec_to_matrix(v), rotvec_to_matrix(np.array([0.0, 0.0, 3.5 * np.pi])), atol=1e-12
        )

    def test_look_at_points_camera_at_target(self):
        pose = Pose.look_at([5, -3, 2], [0, 0, 1])
        target_cam = pose.apply(np.array([0.0, 0.0, 1.0]))
        assert target_cam[2] > 0
        assert np.allclose(target_cam[:2], 0.0, atol=1e-12)

    def test_pixel_ray_hits_point(self):
        intr = Intrinsics.from_fov(50, 640, 480)
        pose = Pose.look_at([4, 4, 3], [0, 0, 0])
        X = np.array([0.3, -0.2, 0.4])
        px = project(X, pose, intr)
        origin, direction = pixel_ray(px, pose, intr)
        closest = origin + direction * ((X - origin) @ direction)
        assert np.linalg.norm(closest - X) < 1e-9


class TestCameraErrors:
    def test_identical_cameras(self, plain_intrinsics):
        cam = Camera("a", plain_intrinsics, Pose.look_at([3, 0, 1], [0, 0, 0]))
        probes = np.array([[0.0, 0.0, 0.0], [0.2, 0.1, 0.3], [-0.3, 0.2, -0.1]])
        e = camera_errors(cam, cam, probes)
        assert e == ErrorTriple(0.0, 0.0, 0.0)

    def test_five_degree_rotation(self, plain_intrinsics):
        pose = Pose.look_at([3, 0, 1], [0, 0, 0])
        # rotate the camera about its own up (y) axis by exactly 5 degrees
        R5 = rotvec_to_matrix(np.array([0.0, np.radians(5.0), 0.0]))
        rotated = Pose.from_matrix(R5 @ pose.R, R5 @ pose.t)
        a = Camera("a", plain_intrinsics, pose)
        b = Camera("b", plain_intrinsics, rotated)
        probes = np.array([[0.0, 0.0, 0.0], [0.1, 0.1, 0.1], [-0.1, 0.2, 0.0]])
        e = camera_errors(b, a, probes)
        assert abs(e.rotation_deg - 5.0) < 1e-6

    def test_center_offset(self, plain_intrinsics):
        pose = Pose.look_at([3, 0, 1], [0, 0, 0])
        shifted = Pose(pose.rotvec, pose.t - pose.R @ np.array([0.0, 0.0, -1.0]) * 0)
        # move the center exactly 1 m: C' = C + u with orientation kept
        u = np.array([0.0, 0.0, 1.0])
        moved = Pose(pose.rotvec, -pose.R @ (pose.center + u))
        e = camera_errors(
            Camera("a", plain_intrinsics, moved),
            Camera("b", plain_intrinsics, pose),
            np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.1], [0.0, 0.1, 0.0]]),
        )
        assert abs(e.translation_m - 1.0) < 1e-9
        assert e.rotation_deg < 1e-9
