"""Meshes, area-uniform sampling, procedural shapes, augmentation, and point-to-mesh distance."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from voxsampler import geometry as G
from voxsampler.errors import ContractError, GeometryError

UNIT_SQUARE = G.TriangleMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


class TestSampleSurface:
    def test_unit_square_mean(self):
        pts = G.sample_surface(UNIT_SQUARE, 100_000, 0)
        np.testing.assert_allclose(pts.mean(axis=0), [0.5, 0.5, 0.0], atol=0.01)

    def test_zero_area_triangle_never_sampled(self):
        mesh = G.TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 2, 2]], [[3, 3, 3], [0, 1, 2]])
        pts = G.sample_surface(mesh, 5000, 1)
        assert np.all(pts[:, 2] == 0.0)
        assert np.all(pts[:, 0] + pts[:, 1] <= 1.0 + 1e-12)

    def test_zero_area_mesh(self):
        mesh = G.TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        with pytest.raises(GeometryError):
            G.sample_surface(mesh, 10, 0)

    def test_bad_count(self):
        with pytest.raises(ContractError):
            G.sample_surface(UNIT_SQUARE, 0, 0)

    def test_determinism(self):
        a = G.sample_surface(UNIT_SQUARE, 50, 3)
        assert a.tobytes() == G.sample_surface(UNIT_SQUARE, 50, 3).tobytes()
        assert not np.array_equal(a, G.sample_surface(UNIT_SQUARE, 50, 4))

    def test_area_proportional_chi_square(self):
        mesh = G.procedural_shape("box", {"extents": [0.3, 1.0, 2.0]}, 4)
        n = 100_000
        pts = G.sample_surface(mesh, n, 11)
        # assign each sample to its face by exact containment distance
        d = np.stack([G._pair_distances(pts, np.repeat(mesh.corners[i:i + 1], n, axis=0))
                      for i in range(len(mesh.triangles))], axis=1)
        owner = d.argmin(axis=1)
        observed = np.bincount(owner, minlength=len(mesh.triangles))
        expected = n * mesh.face_areas / mesh.area
        assert stats.chisquare(observed, expected).pvalue > 0.001

    def test_uniform_within_triangle(self):
        tri = G.TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        pts = G.sample_surface(tri, 200_000, 5)
        # uniform density on the triangle: mean is the centroid, and P(x + y < 1/2) = 1/4
        np.testing.assert_allclose(pts.mean(axis=0), [1 / 3, 1 / 3, 0], atol=0.005)
        frac = np.mean(pts[:, 0] + pts[:, 1] < 0.5)
        assert abs(frac - 0.25) < 3 * math.sqrt(0.25 * 0.75 / len(pts))


class TestProceduralShapes:
    def test_sphere_area(self):
        mesh = G.procedural_shape("sphere", {"radius": 1.0}, 64)
        assert abs(mesh.area - 4 * math.pi) / (4 * math.pi) < 0.01

    def test_box_area_exact(self):
        assert G.procedural_shape("box", {"extents": [2, 2, 2]}, 4).area == 24.0

    def test_torus_area(self):
        mesh = G.procedural_shape("torus", {"major": 1.0, "minor": 0.3}, 64)
        expect = 4 * math.pi ** 2 * 0.3
        assert abs(expect - 11.844) < 1e-3
        assert abs(mesh.area - expect) / expect < 0.01

    @pytest.mark.parametrize("kind,params", [
        ("sphere", {"radius": 0.5}), ("torus", {"major": 0.6, "minor": 0.2}),
        ("box", {"extents": [0.5, 0.7, 0.9], "yaw": 0.4})])
    def test_watertight(self, kind, params):
        mesh = G.procedural_shape(kind, params, 8)
        edges = np.sort(np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]],
                                        mesh.triangles[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert np.all(counts == 2)

    @pytest.mark.parametrize("kind,params", [
        ("sphere", {"radius": -1.0}), ("torus", {"major": 0.3, "minor": 0.5}),
        ("box", {"extents": [1, 0, 1]}), ("cone", {})])
    def test_invalid(self, kind, params):
        with pytest.raises(GeometryError):
            G.procedural_shape(kind, params, 8)

    def test_low_resolution(self):
        with pytest.raises(GeometryError):
            G.procedural_shape("sphere", {"radius": 1.0}, 3)

    def test_random_shapes_stay_in_rotation_safe_domain(self):
        for kind, _, mesh in G.procedural_dataset(G.SHAPE_KINDS, 30, 0, 8):
            v = mesh.vertices
            assert np.sqrt(v[:, 0] ** 2 + v[:, 2] ** 2).max() <= 0.9 + 1e-9
            assert np.abs(v[:, 1]).max() <= 0.9 + 1e-9


class TestNormalizeAndRotate:
    def test_rotation_identity_and_half_turn(self):
        p = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(G.rotate_gravity_axis(p, 0.0), p)
        np.testing.assert_allclose(G.rotate_gravity_axis(p, math.pi), [[-1.0, 0.0, 0.0]], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10, 10), st.integers(0, 2 ** 31 - 1))
    def test_rotation_isometry(self, angle, seed):
        p = np.random.default_rng(seed).normal(size=(20, 3))
        q = G.rotate_gravity_axis(p, angle)
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), np.linalg.norm(p, axis=1), atol=1e-12)
        np.testing.assert_array_equal(q[:, 1], p[:, 1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0, 2 * math.pi))
    def test_normalize_uses_radial_bound(self, seed, angle):
        rng = np.random.default_rng(seed)
        # a long thin box along X would fit per-axis but leave the cube when yawed 45 degrees
        ext = rng.uniform(0.1, 3.0, size=3)
        mesh = G.normalize(G.procedural_shape("box", {"extents": ext.tolist()}, 4))
        assert np.abs(mesh.vertices).max() <= 1.0
        rotated = G.rotate_gravity_axis(mesh.vertices, angle)
        assert np.abs(rotated).max() <= 1.0 - G.DEFAULT_MARGIN + 1e-12

    def test_normalize_margin_hit(self):
        mesh = G.normalize(G.procedural_shape("box", {"extents": [2.0, 0.2, 0.2]}, 4))
        v = mesh.vertices
        radial = np.sqrt(v[:, 0] ** 2 + v[:, 2] ** 2).max()
        assert abs(radial - (1 - G.DEFAULT_MARGIN)) < 1e-12


class TestPointToMesh:
    def test_on_surface(self):
        mesh = G.procedural_shape("torus", {"major": 0.6, "minor": 0.2}, 12)
        mean, _ = G.point_to_mesh_distance(G.sample_surface(mesh, 500, 0), mesh)
        assert mean < 1e-9

    def test_hand_case(self):
        tri = G.TriangleMesh([[-1, -1, 0], [2, -1, 0], [-1, 2, 0]], [[0, 1, 2]])
        mean, std = G.point_to_mesh_distance(np.array([[0.0, 0.0, 1.0]]), tri)
        assert mean == 1.0 and std == 0.0

    def test_region_cases(self):
        tri = G.TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        pts = np.array([[-1.0, -1.0, 0.0], [0.5, -2.0, 0.0], [1.0, 1.0, 0.0], [2.0, 0.0, 1.0]])
        expect = [math.sqrt(2), 2.0, math.sqrt(0.5), math.sqrt(2)]
        np.testing.assert_allclose(G.point_distances_brute(pts, tri), expect, atol=1e-12)

    def test_against_dense_sampling_oracle(self):
        # the exact distance never exceeds, and closely approaches, the distance to dense samples
        mesh = G.procedural_shape("box", {"extents": [0.6, 0.8, 1.0], "yaw": 0.3}, 4)
        dense = G.sample_surface(mesh, 200_000, 9)
        q = np.random.default_rng(2).uniform(-1, 1, size=(30, 3))
        approx = np.array([np.linalg.norm(dense - p, axis=1).min() for p in q])
        exact = G.point_distances_brute(q, mesh)
        assert np.all(exact <= approx + 1e-12)
        assert np.all(approx - exact < 0.01)

    def test_tree_equals_brute(self):
        mesh = G.procedural_shape("sphere", {"radius": 0.7}, 10)
        q = np.random.default_rng(3).uniform(-1, 1, size=(400, 3))
        np.testing.assert_array_equal(G.point_distances_tree(q, mesh), G.point_distances_brute(q, mesh))

    def test_rotation_invariance(self):
        mesh = G.procedural_shape("torus", {"major": 0.5, "minor": 0.15}, 10)
        q = np.random.default_rng(4).uniform(-1, 1, size=(100, 3))
        a = G.point_to_mesh_distance(q, mesh)
        rot = G.yaw_matrix(0.77) @ np.array([[1, 0, 0], [0, math.cos(0.3), -math.sin(0.3)],
                                             [0, math.sin(0.3), math.cos(0.3)]])
        b = G.point_to_mesh_distance(q @ rot.T, mesh.transformed(rot))
        assert abs(a[0] - b[0]) < 1e-9 and abs(a[1] - b[1]) < 1e-9

    def test_empty_cloud(self):
        with pytest.raises(ContractError):
            G.point_to_mesh_distance(np.zeros((0, 3)), UNIT_SQUARE)
