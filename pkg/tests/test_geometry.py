import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from killshape.geometry import (PointCloud, RigidPose, ToySpec, bounding_box, ellipsoid_figure,
                                generate_cubes, generate_ellipsoid_figures, generate_toy,
                                nearest_indices, quaternion_to_matrix, random_rotation, read_cloud,
                                read_ply, read_xyz, sample_cube_surface, sample_ellipsoid_surface,
                                sample_recon_points, unit_box_scale, unsigned_distance, write_ply,
                                write_xyz)


class TestPointCloud:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan, 1.0]]))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))

    def test_points_are_read_only(self):
        c = PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            c.points[0, 0] = 1.0

    def test_sigma1_matches_brute_force(self, rng):
        pts = rng.normal(size=(300, 3))
        c = PointCloud(pts)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        brute = np.sort(d, axis=1)[:, 10]
        np.testing.assert_array_equal(c.sigma1, brute)

    def test_sigma1_needs_eleven_points(self):
        with pytest.raises(ValueError):
            PointCloud(np.eye(3)).sigma1


class TestRigidPose:
    def test_identity(self):
        p = RigidPose.identity()
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(p.apply(x), x)

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidPose(np.diag([1.0, 1.0, 1.0 + 1e-9]), np.zeros(3))

    def test_random_rotations_are_valid(self, rng):
        for _ in range(50):
            R = random_rotation(rng)
            RigidPose(R, np.zeros(3))

    def test_quaternion_identity(self):
        np.testing.assert_allclose(quaternion_to_matrix([1, 0, 0, 0]), np.eye(3))


class TestToySpec:
    def test_count_at_least_two(self):
        with pytest.raises(ValueError):
            ToySpec("cubes", 1)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ToySpec("spheres", 4)


class TestCubes:
    def test_twelve_clouds_of_2000(self):
        clouds = generate_cubes(ToySpec("cubes", 12, 2000, 7))
        assert len(clouds) == 12
        assert all(len(c) == 2000 for c in clouds)

    def test_identity_pose_on_unit_cube_surface(self):
        spec = ToySpec("cubes", 2, 500, 3)
        clouds = generate_cubes(spec, poses=[RigidPose.identity()] * 2)
        for c in clouds:
            np.testing.assert_allclose(np.abs(c.points).max(axis=1), 0.5, atol=1e-15)

    def test_posed_cube_is_a_rigid_image(self):
        clouds = generate_cubes(ToySpec("cubes", 3, 400, 11))
        for c in clouds:
            centered = c.points - c.points.mean(axis=0)
            # all points lie on a cube of side 1: pairwise distances bounded by the diagonal
            assert np.linalg.norm(centered, axis=1).max() <= math.sqrt(3) / 2 + 0.1

    def test_deterministic(self):
        a = generate_cubes(ToySpec("cubes", 4, 100, 5))
        b = generate_cubes(ToySpec("cubes", 4, 100, 5))
        for x, y in zip(a, b):
            assert x.points.tobytes() == y.points.tobytes()

    def test_faces_uniform(self, rng):
        pts = sample_cube_surface(60000, rng)
        face = np.argmax(np.abs(pts), axis=1) * 2 + (pts[np.arange(len(pts)), np.argmax(np.abs(pts), axis=1)] > 0)
        counts = np.bincount(face, minlength=6)
        np.testing.assert_allclose(counts / len(pts), 1 / 6, atol=0.01)


class TestEllipsoidFigures:
    def test_twelve(self):
        assert len(generate_ellipsoid_figures(ToySpec("ellipsoid-figures", 12, 500, 1))) == 12

    def test_canonical_is_mirror_symmetric(self, rng):
        pts = ellipsoid_figure(20000, rng)
        mirrored = pts * np.array([-1.0, 1.0, 1.0])
        d, _ = PointCloud(pts).tree.query(mirrored)
        assert np.mean(d) < 0.02
        assert abs(pts[:, 0].mean()) < 0.01

    def test_deterministic(self):
        a = generate_toy(ToySpec("ellipsoid-figures", 3, 200, 9))
        b = generate_toy(ToySpec("ellipsoid-figures", 3, 200, 9))
        for x, y in zip(a, b):
            assert x.points.tobytes() == y.points.tobytes()

    def test_no_points_inside_other_parts(self, rng):
        # body occupies |x| small; after union no sample lies strictly inside the body
        pts = ellipsoid_figure(5000, rng)
        inside_body = np.sum((pts / np.array([0.25, 0.45, 0.25])) ** 2, axis=1) < 1 - 1e-9
        assert not inside_body.any()

    def test_ellipsoid_samples_on_surface(self, rng):
        a = np.array([0.3, 0.5, 0.2])
        pts = sample_ellipsoid_surface(1000, a, rng)
        np.testing.assert_allclose(np.sum((pts / a) ** 2, axis=1), 1.0, atol=1e-12)

    def test_ellipsoid_area_uniform(self, rng):
        # surface-of-revolution quadrature gives the exact area fraction of the band |z| > c/2
        c = 0.1

        def dA(z):
            r = np.sqrt(1 - (z / c) ** 2)
            return 2 * np.pi * r * np.sqrt(1 + ((z / c ** 2) / r) ** 2)

        want = quad(dA, c / 2, c, limit=200)[0] / quad(dA, 0, c, limit=200)[0]
        pts = sample_ellipsoid_surface(40000, np.array([1.0, 1.0, c]), rng)
        assert abs(np.mean(np.abs(pts[:, 2]) > c / 2) - want) < 0.01


class TestUnsignedDistance:
    def test_simple(self):
        c = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        d, g, on = unsigned_distance(np.array([2.0, 0, 0]), c)
        assert d == 1.0 and not on
        np.testing.assert_array_equal(g, [1.0, 0, 0])

    def test_on_cloud_flagged(self):
        c = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        d, g, on = unsigned_distance(np.array([1.0, 0, 0]), c)
        assert d == 0.0 and on
        np.testing.assert_array_equal(g, 0.0)

    def test_matches_brute_force(self, rng):
        pts = rng.normal(size=(1000, 3))
        q = rng.normal(size=(1000, 3))
        c = PointCloud(pts)
        brute = np.argmin(np.linalg.norm(q[:, None] - pts[None], axis=-1), axis=1)
        np.testing.assert_array_equal(nearest_indices(q, c), brute)
        d, g, _ = unsigned_distance(q, c)
        np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-12)


class TestReconSamples:
    def test_zero_noise_gives_cloud_points(self, rng):
        c = PointCloud(rng.normal(size=(50, 3)))
        q = sample_recon_points(c, 200, 0.0, rng, sigma1=0.0)
        d, _, on = unsigned_distance(q, c)
        assert on.all()

    def test_mixture_std(self, rng):
        c = PointCloud(np.zeros((20, 3)) + rng.normal(size=(20, 3)) * 1e-9)
        s1, s2 = 0.05, 0.3
        q = sample_recon_points(c, 100000, s2, rng, sigma1=s1)
        n = q - c.points.mean(axis=0)
        want = math.sqrt((s1 ** 2 + s2 ** 2) / 2)
        assert abs(n.std() / want - 1) < 0.02

    def test_negative_sigma2(self, rng):
        c = PointCloud(rng.normal(size=(20, 3)))
        with pytest.raises(ValueError):
            sample_recon_points(c, 10, -0.1, rng)


class TestBoundingBox:
    def test_single_point_margin(self):
        lo, hi = bounding_box([PointCloud(np.zeros((1, 3)))], 1.0)
        np.testing.assert_array_equal(lo, -1.0)
        np.testing.assert_array_equal(hi, 1.0)

    def test_tight(self, rng):
        pts = rng.normal(size=(30, 3))
        lo, hi = bounding_box(PointCloud(pts))
        np.testing.assert_array_equal(lo, pts.min(axis=0))
        np.testing.assert_array_equal(hi, pts.max(axis=0))

    @given(st.integers(0, 2**32 - 1))
    def test_union_contains_each(self, seed):
        r = np.random.default_rng(seed)
        a, b = PointCloud(r.normal(size=(5, 3))), PointCloud(r.normal(size=(7, 3)) + 3)
        lo, hi = bounding_box([a, b])
        for c in (a, b):
            clo, chi = bounding_box(c)
            assert (lo <= clo).all() and (hi >= chi).all()

    def test_empty(self):
        with pytest.raises(ValueError):
            bounding_box([])

    def test_unit_box_scale(self):
        c = PointCloud(np.array([[0.0, 0, 0], [2.0, 1, 0]]))
        assert unit_box_scale([c]) == 0.5


class TestIO:
    def test_ply_round_trip_exact(self, tmp_path, rng):
        pts = rng.normal(size=(40, 3))
        write_ply(tmp_path / "a.ply", pts)
        back = read_ply(tmp_path / "a.ply")
        assert back.points.tobytes() == pts.tobytes()
        assert read_cloud(tmp_path / "a.ply").points.tobytes() == pts.tobytes()

    def test_xyz_round_trip_exact(self, tmp_path, rng):
        pts = rng.normal(size=(40, 3))
        write_xyz(tmp_path / "a.xyz", PointCloud(pts))
        assert read_xyz(tmp_path / "a.xyz").points.tobytes() == pts.tobytes()

    def test_ply_header(self, tmp_path):
        write_ply(tmp_path / "a.ply", np.zeros((2, 3)))
        lines = (tmp_path / "a.ply").read_text().splitlines()
        assert lines[:3] == ["ply", "format ascii 1.0", "element vertex 2"]
        assert "property double x" in lines

    def test_ply_with_extra_properties(self, tmp_path):
        (tmp_path / "b.ply").write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float nx\nproperty float x\n"
            "property float y\nproperty float z\nend_header\n9 1 2 3\n9 4 5 6\n")
        np.testing.assert_array_equal(read_ply(tmp_path / "b.ply").points, [[1, 2, 3], [4, 5, 6]])

    def test_binary_ply_rejected(self, tmp_path):
        (tmp_path / "c.ply").write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(ValueError):
            read_ply(tmp_path / "c.ply")

    def test_not_ply(self, tmp_path):
        (tmp_path / "d.ply").write_text("hello\n")
        with pytest.raises(ValueError):
            read_ply(tmp_path / "d.ply")

    def test_truncated_ply(self, tmp_path):
        (tmp_path / "e.ply").write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
            "property float z\nend_header\n1 2 3\n4 5\n")
        with pytest.raises(ValueError, match="truncated"):
            read_ply(tmp_path / "e.ply")
