from __future__ import annotations

import math

import numpy as np
import pytest

from ringloc.cloud import EmptyCloudError, depth_to_cloud, estimate_normals, fit_plane, make_ring_template
from ringloc.core import CameraIntrinsics, GeometryError, PointCloud, RingSpec, rotation_about
from ringloc.detect import detect_rings
from ringloc.roi_mask import crop_depth, extract_contour, make_mask, survivors
from ringloc.simulate import DEFAULT_INTRINSICS

from conftest import cached_render


def angle_deg(a, b):
    c = np.clip(np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)), -1, 1)
    return np.degrees(np.arccos(c))


class TestDepthToCloud:
    def test_single_survivor(self, k600):
        cloud = depth_to_cloud([(320, 240, 400)], k600)
        np.testing.assert_allclose(cloud.points, [[0, 0, 400]])

    def test_similar_triangles(self, k600):
        cloud = depth_to_cloud([(100, 50, 350.0), (700, 50, 350.0)], k600)
        assert cloud.points[1, 0] - cloud.points[0, 0] == pytest.approx(350.0)

    def test_empty(self, k600):
        with pytest.raises(EmptyCloudError):
            depth_to_cloud(np.zeros((0, 3)), k600)

    def test_count_and_order_preserved(self, k600, rng):
        rows = np.column_stack([rng.integers(0, 640, 30), rng.integers(0, 480, 30), rng.uniform(300, 500, 30)])
        cloud = depth_to_cloud(rows, k600)
        assert len(cloud) == 30
        np.testing.assert_allclose(cloud.points[:, 2], rows[:, 2])

    def test_extent_clamp_is_a_radius(self, k600):
        rows = [(320, 240, 400.0)] * 5 + [(320 + 60, 240, 400.0)]  # second point is 40 mm off
        assert len(depth_to_cloud(rows, k600, max_extent=45.0)) == 6
        assert len(depth_to_cloud(rows, k600, max_extent=35.0)) == 5

    def test_render_plane_matches_tilt(self):
        gray, depth, truth = cached_render(tilt=30.0, noisy=False)
        (box, _), = detect_rings(gray, intrinsics=DEFAULT_INTRINSICS)
        mask = make_mask(extract_contour(gray, box), 640, 480)
        cloud = depth_to_cloud(survivors(crop_depth(depth, mask)), DEFAULT_INTRINSICS)
        _, n = fit_plane(cloud.points)
        assert min(angle_deg(n[None], truth.normal[None])[0], angle_deg(-n[None], truth.normal[None])[0]) < 1.0


class TestNormals:
    def test_plane(self, rng):
        pts = np.column_stack([rng.uniform(-20, 20, 300), rng.uniform(-20, 20, 300), np.full(300, 400.0)])
        cloud = estimate_normals(PointCloud(pts), k=10)
        np.testing.assert_allclose(cloud.normals, np.tile([0, 0, -1.0], (300, 1)), atol=1e-6)

    def test_sphere_radial(self):
        # dense Fibonacci sampling of the camera-facing cap of a sphere
        n = 20000
        i = np.arange(n) + 0.5
        polar = np.arccos(1 - 2 * i / n)
        az = math.pi * (1 + 5**0.5) * i
        dirs = np.column_stack([np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), -np.cos(polar)])
        dirs = dirs[dirs[:, 2] < -0.5]
        center = np.array([0.0, 0.0, 400.0])
        cloud = estimate_normals(PointCloud(center + 50.0 * dirs), k=20)
        assert angle_deg(cloud.normals, dirs).max() <= 2.0

    def test_orientation_and_unit_length(self, rng):
        pts = rng.normal(size=(200, 3)) * [30, 30, 2] + [0, 0, 500]
        cloud = estimate_normals(PointCloud(pts))
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-6)
        assert np.all(np.einsum("ij,ij->i", cloud.normals, -pts) >= 0)

    def test_collinear_k3(self):
        pts = np.column_stack([np.arange(4.0), np.zeros(4), np.full(4, 100.0)])
        with pytest.raises(GeometryError):
            estimate_normals(PointCloud(pts), k=3)

    def test_cloud_too_small_for_k(self, rng):
        with pytest.raises(GeometryError):
            estimate_normals(PointCloud(rng.normal(size=(5, 3))), k=5)

    def test_default_k_clamped(self, rng):
        pts = rng.normal(size=(8, 3)) * [10, 10, 0.1] + [0, 0, 300]
        assert estimate_normals(PointCloud(pts)).has_normals


class TestTemplate:
    def test_default_radii_and_count(self):
        t = make_ring_template(RingSpec(), 0.5)
        rho = np.hypot(t.cloud.points[:, 0], t.cloud.points[:, 1])
        assert rho.min() >= 5.0 and rho.max() <= 12.0
        expected = math.pi * (12**2 - 5**2) / 0.25
        assert abs(len(t.cloud) - expected) <= 0.1 * expected
        np.testing.assert_array_equal(t.cloud.points[:, 2], 0.0)
        np.testing.assert_array_equal(t.cloud.normals, np.tile([0, 0, 1.0], (len(t.cloud), 1)))

    def test_centroid_at_origin(self):
        t = make_ring_template()
        np.testing.assert_allclose(t.cloud.points.mean(axis=0), 0.0, atol=1e-9)

    @pytest.mark.parametrize("spacing", [12.0, 0.0, -1.0, 3.6])
    def test_spacing_precondition(self, spacing):
        with pytest.raises(GeometryError):
            make_ring_template(RingSpec(), spacing)

    def test_rotation_about_z_keeps_frame(self):
        t = make_ring_template()
        R = rotation_about((0, 0, 1), 0.7)
        pts = t.cloud.points @ R.T
        c, n = fit_plane(pts)
        np.testing.assert_allclose(c, 0.0, atol=1e-9)
        np.testing.assert_allclose(abs(n[2]), 1.0, atol=1e-9)

    def test_shell_walls(self):
        spec = RingSpec()
        t = make_ring_template(spec, 0.5, shell=True)
        walls = t.cloud.points[:, 2] < 0
        assert walls.any() and t.cloud.points[:, 2].min() >= -spec.thickness
        rho = np.hypot(t.cloud.points[walls, 0], t.cloud.points[walls, 1])
        assert np.all(np.isclose(rho, 5.0) | np.isclose(rho, 12.0))
        radial = t.cloud.normals[walls]
        np.testing.assert_allclose(radial[:, 2], 0.0)

    def test_density_uniform(self):
        t = make_ring_template(RingSpec(), 0.5)
        rho = np.hypot(t.cloud.points[:, 0], t.cloud.points[:, 1])
        inner = np.sum(rho < 8.5) / (math.pi * (8.5**2 - 25))
        outer = np.sum(rho >= 8.5) / (math.pi * (144 - 8.5**2))
        assert inner == pytest.approx(outer, rel=0.05)


class TestFitPlane:
    def test_collinear(self):
        with pytest.raises(GeometryError):
            fit_plane([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
