"""Shape metrics, mesh extraction and interpolation reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from skimage.measure import marching_cubes

from . import deformation as deform
from ._validation import check_points
from .diffnet import DTYPE, ShapeNetwork, as_tensor, derivative_bundle
from .exceptions import EmptySurface, NoValidSamples, SizeMismatch
from .geometry import PointCloud, bounding_box
from .shapespace import interpolate, latent_velocity, project_to_levelset

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 64
DEFAULT_SAMPLES = 512
DEGENERATE_AREA = 1e-14
GRID_CHUNK = 32768
REPORT_COLUMNS = (
    "pair_start", "pair_end", "t", "chamfer_start", "chamfer_end",
    "wasserstein_start", "wasserstein_end", "killing_energy", "surface_area",
)

# one distinct RGB per part label, cycled when k exceeds the palette
PALETTE = np.array([
    [0.90, 0.30, 0.25], [0.25, 0.55, 0.90], [0.35, 0.75, 0.35], [0.95, 0.75, 0.20],
    [0.60, 0.40, 0.80], [0.20, 0.80, 0.80], [0.95, 0.50, 0.70], [0.55, 0.55, 0.55],
])


def _pts(x, name):
    return x.points if isinstance(x, PointCloud) else check_points(x, name=name)


def chamfer(X1, X2) -> float:
    """Average of the two one-sided mean squared nearest-neighbour distances."""
    a, b = _pts(X1, "X1"), _pts(X2, "X2")
    d12, _ = cKDTree(b).query(a)
    d21, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d12 ** 2)) + float(np.mean(d21 ** 2)))


def wasserstein(X1, X2) -> float:
    """Minimal total displacement sum |phi(x) - x| over bijections phi."""
    a, b = _pts(X1, "X1"), _pts(X2, "X2")
    if len(a) != len(b):
        raise SizeMismatch(f"Wasserstein needs equal sizes, got {len(a)} and {len(b)}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    labels: np.ndarray | None = None  # (V,) argmax part per vertex

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def edge_counts(self) -> dict[tuple[int, int], int]:
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(map(int, k)): int(c) for k, c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        return all(c == 2 for c in self.edge_counts().values())

    def sample(self, n: int, rng) -> np.ndarray:
        """n points uniform on the surface (area-weighted triangles, uniform barycentrics)."""
        rng = np.random.default_rng(rng)
        areas = self.triangle_areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.uniform(size=(n, 1)))
        r2 = rng.uniform(size=(n, 1))
        v = self.vertices[self.triangles[tri]]
        return (1 - r1) * v[:, 0] + r1 * (1 - r2) * v[:, 1] + r1 * r2 * v[:, 2]


def _clean(vertices, triangles):
    """Drop near-zero-area triangles and the vertices they orphan."""
    mesh = TriangleMesh(vertices, triangles)
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    tris = triangles[keep]
    used, inverse = np.unique(tris, return_inverse=True)
    return vertices[used], inverse.reshape(-1, 3)


def evaluate_grid(net: ShapeNetwork, z, box, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """f(., z) on a resolution^3 lattice spanning ``box``; returns (values, spacing)."""
    lo, hi = (np.asarray(v, dtype=np.float64) for v in box)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    z = as_tensor(z).detach().reshape(1, -1)
    out = np.empty(len(grid))
    with torch.no_grad():
        for s in range(0, len(grid), GRID_CHUNK):
            p = torch.as_tensor(grid[s:s + GRID_CHUNK], dtype=DTYPE)
            out[s:s + GRID_CHUNK] = net.f(p, z.expand(len(p), -1)).numpy()
    spacing = (hi - lo) / (resolution - 1)
    return out.reshape(resolution, resolution, resolution), spacing


def extract_mesh(net: ShapeNetwork, z, box, resolution: int = DEFAULT_RESOLUTION,
                 iso: float = 0.0, labels: bool = False) -> TriangleMesh:
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    values, spacing = evaluate_grid(net, z, box, resolution)
    if not (values.min() < iso < values.max()):
        raise EmptySurface(f"level {iso} not crossed in box (f in [{values.min():.3g}, {values.max():.3g}])")
    verts, faces, _, _ = marching_cubes(values, level=iso, spacing=tuple(spacing))
    verts = verts + np.asarray(box[0], dtype=np.float64)
    verts, faces = _clean(verts.astype(np.float64), faces)
    if len(faces) == 0:
        raise EmptySurface("level set produced no non-degenerate triangles")
    part = None
    if labels:
        with torch.no_grad():
            zt = as_tensor(z).detach().reshape(1, -1).expand(len(verts), -1)
            part = net.p(torch.as_tensor(verts), zt).argmax(dim=1).numpy()
    return TriangleMesh(verts, faces, part)


def write_obj(path, mesh: TriangleMesh) -> None:
    """OBJ with ``v x y z [r g b]`` records (colours from part labels) and 1-based faces."""
    buf = io.StringIO()
    colors = PALETTE[mesh.labels % len(PALETTE)] if mesh.labels is not None else None
    for i, (x, y, z) in enumerate(mesh.vertices.tolist()):
        if colors is None:
            buf.write(f"v {x!r} {y!r} {z!r}\n")
        else:
            r, g, b = colors[i]
            buf.write(f"v {x!r} {y!r} {z!r} {r:.3f} {g:.3f} {b:.3f}\n")
    for a, b, c in (mesh.triangles + 1).tolist():
        buf.write(f"f {a} {b} {c}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def read_obj(path) -> TriangleMesh:
    verts, faces, cols = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
                if len(parts) >= 7:
                    cols.append([float(v) for v in parts[4:7]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    labels = None
    if cols and len(cols) == len(verts):
        dist = np.linalg.norm(np.asarray(cols)[:, None] - PALETTE[None], axis=2)
        labels = dist.argmin(axis=1)
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64), labels)


def killing_energy_at(net: ShapeNetwork, z, velocity, box, n_points: int, k: int, rng,
                      newton_iters: int = 5, noise_std: float = 0.0) -> float:
    """Mean Killing energy of the LS-optimal field for the latent velocity ``velocity``.

    Surface points come from projecting uniform seeds. The energy is evaluated
    for the unit direction and scaled by |velocity|^2, since the optimal field
    is linear in the velocity.
    """
    z = as_tensor(z).detach().reshape(1, -1)
    vel = as_tensor(velocity).detach().reshape(1, -1)
    speed = float(torch.linalg.vector_norm(vel))
    if speed == 0:
        return 0.0
    eta = vel / speed
    lo, hi = box
    seeds = rng.uniform(lo, hi, size=(n_points, 3))
    x, _ = project_to_levelset(net, z, seeds, newton_iters, noise_std, rng)
    zz, ee = z.expand(len(x), -1), eta.expand(len(x), -1)
    with torch.no_grad():
        bundle = derivative_bundle(net, x, zz, ee)
        probs = net.p(x, zz)
    batch = deform.DeformationBatch(bundle, probs, zz, ee, torch.zeros(len(x), dtype=torch.long))
    batch, _ = batch.filter_valid()
    if len(batch) == 0:
        raise NoValidSamples("no valid surface samples for the Killing energy")
    fields = deform.solve_affine_fields(batch, k)
    with torch.no_grad():
        energy = deform.deformation_loss(batch, fields)
    return float(energy) * speed ** 2


def normalize_unit_box(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Map ``points`` by the transform that sends ``reference``'s box to a unit-longest-side box at 0."""
    lo, hi = reference.min(axis=0), reference.max(axis=0)
    return (points - 0.5 * (lo + hi)) / float(np.max(hi - lo))


def reconstruction_chamfer(net: ShapeNetwork, z, cloud: PointCloud, box,
                           resolution: int = DEFAULT_RESOLUTION, n_samples: int | None = None,
                           rng=None) -> float:
    """Chamfer between the reconstructed surface and ``cloud``, both normalised by the cloud's box."""
    mesh = extract_mesh(net, z, box, resolution)
    n = n_samples or len(cloud)
    recon = mesh.sample(n, np.random.default_rng(rng))
    ref = cloud.points
    return chamfer(normalize_unit_box(recon, ref), normalize_unit_box(ref, ref))


def _report_box(ckpt, box, clouds=None):
    if box is not None:
        return box
    if clouds is not None:
        return bounding_box(clouds, ckpt.config.box_margin)
    if ckpt.box is not None:
        return ckpt.box[0], ckpt.box[1]
    raise ValueError("need a box, the training clouds or a checkpoint that stores its box")


def interpolation_report(ckpt, pairs, steps: int, mode: str = "linear",
                         resolution: int = DEFAULT_RESOLUTION, n_samples: int = DEFAULT_SAMPLES,
                         n_energy: int = 256, seed: int = 0, box=None, clouds=None,
                         meshes_out: list | None = None) -> list[dict]:
    """One row per (pair, t) on a uniform t grid of ``steps`` values in [0, 1].

    Distances compare the interpolated surface with the reconstructions at
    both endpoint codes (``n_samples`` area-uniform points each). The
    Killing energy uses the unnormalised path velocity dz/dt, so it measures
    deformation per unit path parameter and is comparable across models.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    net, codes = ckpt.net, ckpt.latents.codes.detach()
    box = _report_box(ckpt, box, clouds)
    ts = np.linspace(0.0, 1.0, steps)
    rows = []
    for pi, (i, j) in enumerate(pairs):
        rng = np.random.default_rng([seed, pi])
        z1, z2 = codes[int(i)], codes[int(j)]
        end1 = extract_mesh(net, z1, box, resolution).sample(n_samples, rng)
        end2 = extract_mesh(net, z2, box, resolution).sample(n_samples, rng)
        for t in ts:
            tt = torch.tensor(t, dtype=DTYPE)
            z = interpolate(z1, z2, tt, mode)
            mesh = extract_mesh(net, z, box, resolution, labels=ckpt.config.k > 1)
            if meshes_out is not None:
                meshes_out.append(((int(i), int(j), float(t)), mesh))
            pts = mesh.sample(n_samples, rng)
            vel = latent_velocity(z1, z2, tt, mode)
            energy = killing_energy_at(net, z, vel, box, n_energy, ckpt.config.k, rng)
            rows.append({
                "pair_start": int(i), "pair_end": int(j), "t": float(t),
                "chamfer_start": chamfer(pts, end1), "chamfer_end": chamfer(pts, end2),
                "wasserstein_start": wasserstein(pts, end1),
                "wasserstein_end": wasserstein(pts, end2),
                "killing_energy": energy, "surface_area": mesh.area(),
            })
    return rows


def write_csv(path, rows: list[dict], columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else REPORT_COLUMNS))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class PathStats:
    pair: tuple[int, int]
    killing_energy: float  # mean over midpoints
    area_deviation: float  # mean |area(t) - mean endpoint area| over midpoints


def path_statistics(ckpt, pairs, midpoints: int = 5, mode: str = "linear",
                    resolution: int = 32, n_energy: int = 256, seed: int = 0,
                    box=None) -> list[PathStats]:
    """Deformation energy and area drift at ``midpoints`` interior t values of each pair."""
    net, codes, k = ckpt.net, ckpt.latents.codes.detach(), ckpt.config.k
    box = _report_box(ckpt, box)
    ts = np.arange(1, midpoints + 1) / (midpoints + 1)
    out = []
    for pi, (i, j) in enumerate(pairs):
        rng = np.random.default_rng([seed, pi])
        z1, z2 = codes[int(i)], codes[int(j)]
        ref = 0.5 * (extract_mesh(net, z1, box, resolution).area()
                     + extract_mesh(net, z2, box, resolution).area())
        energies, devs = [], []
        for t in ts:
            tt = torch.tensor(t, dtype=DTYPE)
            z = interpolate(z1, z2, tt, mode)
            vel = latent_velocity(z1, z2, tt, mode)
            energies.append(killing_energy_at(net, z, vel, box, n_energy, k, rng))
            devs.append(abs(extract_mesh(net, z, box, resolution).area() - ref))
        out.append(PathStats((int(i), int(j)), float(np.mean(energies)), float(np.mean(devs))))
    return out
