import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from killshape.diffnet import DTYPE, MlpConfig
from killshape.evaluation import (PALETTE, REPORT_COLUMNS, TriangleMesh, chamfer, extract_mesh,
                                  interpolation_report, killing_energy_at, normalize_unit_box,
                                  path_statistics, read_csv, read_obj, wasserstein, write_csv,
                                  write_obj)
from killshape.exceptions import EmptySurface, SizeMismatch
from killshape.selftest import random_net
from killshape.training import init_checkpoint, toy_preset

from conftest import unit

BOX = (np.full(3, -1.5), np.full(3, 1.5))


class SphereNet(torch.nn.Module):
    """Signed distance to a sphere of radius 1 + z[0]; two parts split at x = 0."""

    class _F(torch.nn.Module):
        def forward(self, x, z):
            return torch.linalg.vector_norm(x, dim=1) - 1 - z[:, 0]

    class _P(torch.nn.Module):
        def forward(self, x, z):
            return torch.stack([(x[:, 0] < 0).to(DTYPE), (x[:, 0] >= 0).to(DTYPE)], dim=1)

    def __init__(self):
        super().__init__()
        self.f = self._F()
        self.p = self._P()


# -- point-set metrics -------------------------------------------------------

class TestChamfer:
    def test_brute_force(self, rng):
        a, b = rng.normal(size=(150, 3)), rng.normal(size=(90, 3))
        d = ((a[:, None] - b[None]) ** 2).sum(-1)
        want = 0.5 * (d.min(1).mean() + d.min(0).mean())
        assert chamfer(a, b) == pytest.approx(want, rel=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_and_zero_on_self(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(20, 3)), r.normal(size=(30, 3))
        assert chamfer(a, b) == chamfer(b, a)
        assert chamfer(a, a) == 0.0

    def test_translation(self):
        a = np.zeros((1, 3))
        assert chamfer(a, a + [0.0, 0.0, 2.0]) == 4.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))


class TestWasserstein:
    def test_permutation_oracle(self, rng):
        for n in range(1, 7):
            p, q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
            cost = np.linalg.norm(p[:, None] - q[None], axis=-1)
            best = min(cost[np.arange(n), list(s)].sum() for s in itertools.permutations(range(n)))
            assert wasserstein(p, q) == pytest.approx(best, abs=1e-12)

    def test_permutation_invariant(self, rng):
        a = rng.normal(size=(40, 3))
        assert wasserstein(a, a[rng.permutation(40)]) == 0.0

    def test_translation_is_sum_of_shifts(self, rng):
        a = rng.normal(size=(10, 3)) * 0.01
        assert wasserstein(a, a + [5.0, 0, 0]) == pytest.approx(50.0, rel=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            wasserstein(np.zeros((3, 3)), np.zeros((4, 3)))


def test_normalize_unit_box():
    ref = np.array([[0.0, 0, 0], [4.0, 2, 2]])
    out = normalize_unit_box(ref, ref)
    np.testing.assert_allclose(out, [[-0.5, -0.25, -0.25], [0.5, 0.25, 0.25]])


# -- meshes ------------------------------------------------------------------

class TestMesh:
    def test_sphere_mesh(self):
        mesh = extract_mesh(SphereNet(), np.zeros(1), BOX, resolution=48)
        assert mesh.area() == pytest.approx(4 * math.pi, rel=0.01)
        assert mesh.is_watertight()
        np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0, atol=5e-3)

    def test_labels(self):
        mesh = extract_mesh(SphereNet(), np.zeros(1), BOX, resolution=16, labels=True)
        np.testing.assert_array_equal(mesh.labels, (mesh.vertices[:, 0] >= 0).astype(int))

    def test_empty_surface(self):
        with pytest.raises(EmptySurface):
            extract_mesh(SphereNet(), np.array([5.0]), BOX, resolution=16)

    def test_resolution_floor(self):
        with pytest.raises(ValueError):
            extract_mesh(SphereNet(), np.zeros(1), BOX, resolution=4)

    def test_sample_is_area_weighted(self):
        # two triangles with areas 1/2 and 2
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [12, 0, 0], [10, 2, 0.0]])
        mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
        pts = mesh.sample(50000, 0)
        assert np.mean(pts[:, 0] > 5) == pytest.approx(0.8, abs=0.01)
        small = pts[pts[:, 0] < 5]
        assert (small[:, :2].sum(1) <= 1 + 1e-12).all() and (small >= -1e-15).all()
        # uniform inside the triangle: centroid at 1/3
        np.testing.assert_allclose(small[:, :2].mean(0), 1 / 3, atol=0.01)

    def test_bad_indices(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_open_mesh_not_watertight(self):
        assert not TriangleMesh(np.eye(3), [[0, 1, 2]]).is_watertight()

    def test_obj_round_trip(self, tmp_path):
        mesh = extract_mesh(SphereNet(), np.zeros(1), BOX, resolution=12, labels=True)
        write_obj(tmp_path / "m.obj", mesh)
        back = read_obj(tmp_path / "m.obj")
        assert back.vertices.tobytes() == mesh.vertices.tobytes()
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        np.testing.assert_array_equal(back.labels, mesh.labels)
        first = (tmp_path / "m.obj").read_text().splitlines()[0].split()
        assert first[0] == "v" and len(first) == 7

    def test_obj_faces_one_based(self, tmp_path):
        write_obj(tmp_path / "t.obj", TriangleMesh(np.eye(3), [[0, 1, 2]]))
        assert "f 1 2 3" in (tmp_path / "t.obj").read_text()

    def test_palette_distinct(self):
        assert len({tuple(c) for c in PALETTE}) == len(PALETTE)


# -- deformation energy and reports ------------------------------------------

class TestKillingEnergyAt:
    def test_quadratic_in_speed(self, rng):
        net = random_net(rng, MlpConfig(parts=2))
        z = rng.normal(0, 0.1, size=8)
        vel = unit(rng.normal(size=8))
        e1 = killing_energy_at(net, z, vel, BOX, 128, 2, np.random.default_rng(5))
        e3 = killing_energy_at(net, z, 3 * vel, BOX, 128, 2, np.random.default_rng(5))
        assert e1 > 0
        assert e3 == pytest.approx(9 * e1, rel=1e-12)

    def test_zero_velocity(self, net):
        assert killing_energy_at(net, np.zeros(8), np.zeros(8), BOX, 16, 1, None) == 0.0


@pytest.fixture(scope="module")
def fresh_ckpt():
    ck = init_checkpoint(toy_preset("ellipsoid-figures", epochs=1), 3)
    with torch.no_grad():
        ck.latents.codes.mul_(30)
    ck.box = np.stack(BOX)
    return ck


class TestReports:
    def test_interpolation_report(self, fresh_ckpt, tmp_path):
        meshes = []
        rows = interpolation_report(fresh_ckpt, [(0, 1)], steps=3, resolution=16, n_samples=64,
                                    n_energy=32, meshes_out=meshes)
        assert [r["t"] for r in rows] == [0.0, 0.5, 1.0]
        assert set(rows[0]) == set(REPORT_COLUMNS)
        # each endpoint is closer to its own reconstruction than to the other end
        assert rows[0]["chamfer_start"] < rows[0]["chamfer_end"]
        assert rows[2]["chamfer_end"] < rows[2]["chamfer_start"]
        assert len(meshes) == 3 and meshes[1][0] == (0, 1, 0.5)
        assert meshes[0][1].labels is not None
        write_csv(tmp_path / "r.csv", rows, REPORT_COLUMNS)
        back = read_csv(tmp_path / "r.csv")
        assert list(back[0]) == list(REPORT_COLUMNS)
        assert float(back[2]["killing_energy"]) == rows[2]["killing_energy"]

    def test_report_deterministic(self, fresh_ckpt):
        kw = dict(steps=2, resolution=12, n_samples=32, n_energy=16, seed=4)
        assert interpolation_report(fresh_ckpt, [(1, 2)], **kw) == \
            interpolation_report(fresh_ckpt, [(1, 2)], **kw)

    def test_steps_validated(self, fresh_ckpt):
        with pytest.raises(ValueError):
            interpolation_report(fresh_ckpt, [(0, 1)], steps=1)

    def test_path_statistics(self, fresh_ckpt):
        stats = path_statistics(fresh_ckpt, [(0, 1), (0, 2)], midpoints=2, resolution=12,
                                n_energy=16)
        assert [s.pair for s in stats] == [(0, 1), (0, 2)]
        assert all(s.killing_energy >= 0 and s.area_deviation >= 0 for s in stats)
