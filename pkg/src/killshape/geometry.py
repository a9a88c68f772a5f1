"""Toy shape generation, point clouds and unsigned-distance queries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points, check_positive_int

SIGMA_NEIGHBOR = 10
DEFAULT_SIGMA2 = 0.3


@dataclass(eq=False)
class PointCloud:
    """A nonempty set of 3-D points with a lazily built kd-tree.

    ``sigma1`` is the per-point distance to the 10th nearest neighbour
    (the point itself not counted), computed on first access.
    """

    points: np.ndarray
    _tree: cKDTree | None = field(default=None, init=False, repr=False)
    _sigma1: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.points = check_points(self.points, name="points")
        self.points.setflags(write=False)

    def __len__(self):
        return self.points.shape[0]

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    @property
    def sigma1(self) -> np.ndarray:
        if self._sigma1 is None:
            n = len(self)
            if n <= SIGMA_NEIGHBOR:
                raise ValueError(
                    f"sigma1 needs more than {SIGMA_NEIGHBOR} points, cloud has {n}"
                )
            d, _ = self.tree.query(self.points, k=SIGMA_NEIGHBOR + 1)
            self._sigma1 = d[:, SIGMA_NEIGHBOR].copy()
            self._sigma1.setflags(write=False)
        return self._sigma1


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-12, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ToySpec:
    kind: str = "cubes"
    count: int = 12
    samples_per_shape: int = 2000
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("cubes", "ellipsoid-figures"):
            raise ValueError(f"unknown toy kind {self.kind!r}")
        check_positive_int(self.count, name="count", minimum=2)
        check_positive_int(self.samples_per_shape, name="samples_per_shape")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must fit in an unsigned 64-bit integer")


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation: normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_cube_surface(n: int, rng: np.random.Generator, side: float = 1.0) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned cube centred at the origin."""
    h = side / 2.0
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-h, h, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, -h, h)
    pts = np.empty((n, 3))
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        pts[rows, a] = sign[rows]
        pts[rows, others[0]] = uv[rows, 0]
        pts[rows, others[1]] = uv[rows, 1]
    return pts


def sample_ellipsoid_surface(n: int, semi_axes, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform samples on an axis-aligned ellipsoid (rejection on the sphere map)."""
    a = np.asarray(semi_axes, dtype=np.float64)
    bound = 1.0 / a.min()
    out = []
    have = 0
    while have < n:
        m = max(2 * (n - have), 64)
        u = rng.standard_normal((m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        # area element of the map u -> a*u is proportional to |u / a|
        density = np.linalg.norm(u / a, axis=1)
        keep = rng.uniform(0.0, bound, size=m) < density
        out.append(u[keep] * a)
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def generate_cubes(spec: ToySpec, poses: list[RigidPose] | None = None) -> list[PointCloud]:
    """Unit cubes under independent uniform random rigid poses.

    Rotations are uniform on SO(3); translations uniform in [-0.5, 0.5]^3.
    ``poses`` overrides the random poses (used for controlled tests).
    """
    if spec.kind != "cubes":
        raise ValueError("spec.kind must be 'cubes'")
    rng = np.random.default_rng(spec.rng_seed)
    clouds = []
    for i in range(spec.count):
        R = random_rotation(rng)
        t = rng.uniform(-0.5, 0.5, size=3)
        pose = RigidPose(R, t) if poses is None else poses[i]
        pts = sample_cube_surface(spec.samples_per_shape, rng)
        clouds.append(PointCloud(pose.apply(pts)))
    return clouds


# canonical figure: a body with a horizontal "arms" bar above and "legs" bar below
BODY_AXES = (0.25, 0.45, 0.25)
LIMB_AXES = (0.45, 0.1, 0.1)
ARM_PIVOT = (0.0, 0.45, 0.0)
LEG_PIVOT = (0.0, -0.45, 0.0)


def _inside_ellipsoid(points, center, axes, rotation):
    local = (points - center) @ rotation
    return np.sum((local / np.asarray(axes)) ** 2, axis=1) < 1.0


def ellipsoid_figure(
    n: int,
    rng: np.random.Generator,
    shift: float = 0.0,
    arm_angle: float = 0.0,
    leg_angle: float = 0.0,
) -> np.ndarray:
    """Surface samples of the union of body, arm and leg ellipsoids."""
    parts = [
        (np.array([shift, 0.0, 0.0]), BODY_AXES, np.eye(3)),
        (np.array(ARM_PIVOT) + [shift, 0.0, 0.0], LIMB_AXES, rotation_z(arm_angle)),
        (np.array(LEG_PIVOT) + [shift, 0.0, 0.0], LIMB_AXES, rotation_z(leg_angle)),
    ]
    areas = np.array([_ellipsoid_area(ax) for _, ax, _ in parts])
    chunks = []
    have = 0
    while have < n:
        m = 2 * (n - have) + 64
        counts = rng.multinomial(m, areas / areas.sum())
        batch = []
        for idx, ((c, ax, R), cnt) in enumerate(zip(parts, counts)):
            pts = sample_ellipsoid_surface(int(cnt), ax, rng) @ R.T + c
            visible = np.ones(len(pts), dtype=bool)
            for jdx, (c2, ax2, R2) in enumerate(parts):
                if jdx != idx:
                    visible &= ~_inside_ellipsoid(pts, c2, ax2, R2)
            batch.append(pts[visible])
        batch = np.concatenate(batch)
        rng.shuffle(batch)
        chunks.append(batch)
        have += len(batch)
    return np.concatenate(chunks)[:n]


def _ellipsoid_area(axes) -> float:
    # Knud Thomsen approximation; only used to split samples between parts
    a, b, c = axes
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def generate_ellipsoid_figures(
    spec: ToySpec, params: list[tuple[float, float, float]] | None = None
) -> list[PointCloud]:
    """Body shifted along x in [-0.5, 0.5]; arm/leg angles about z in [-pi/4, pi/4].

    ``params`` overrides the random (shift, arm_angle, leg_angle) triples.
    """
    if spec.kind != "ellipsoid-figures":
        raise ValueError("spec.kind must be 'ellipsoid-figures'")
    rng = np.random.default_rng(spec.rng_seed)
    clouds = []
    for i in range(spec.count):
        shift = rng.uniform(-0.5, 0.5)
        arm, leg = rng.uniform(-math.pi / 4, math.pi / 4, size=2)
        if params is not None:
            shift, arm, leg = params[i]
        pts = ellipsoid_figure(spec.samples_per_shape, rng, shift, arm, leg)
        clouds.append(PointCloud(pts))
    return clouds


def generate_toy(spec: ToySpec) -> list[PointCloud]:
    if spec.kind == "cubes":
        return generate_cubes(spec)
    return generate_ellipsoid_figures(spec)


def unsigned_distance(queries, cloud: PointCloud):
    """Distance to the nearest cloud point and its spatial gradient.

    Returns ``(d, grad, on_cloud)``. Where a query coincides with a cloud
    point the distance is not differentiable: ``grad`` is zero there and
    ``on_cloud`` is True. A single 3-vector query returns scalars/3-vectors.
    """
    single = np.ndim(queries) == 1
    q = check_points(queries, name="queries")
    d, idx = cloud.tree.query(q)
    diff = q - cloud.points[idx]
    on_cloud = d == 0.0
    grad = np.zeros_like(diff)
    ok = ~on_cloud
    grad[ok] = diff[ok] / d[ok, None]
    if single:
        return float(d[0]), grad[0], bool(on_cloud[0])
    return d, grad, on_cloud


def nearest_indices(queries, cloud: PointCloud) -> np.ndarray:
    _, idx = cloud.tree.query(check_points(queries, name="queries"))
    return idx


def sample_recon_points(
    cloud: PointCloud, batch: int, sigma2: float = DEFAULT_SIGMA2, rng=None, *, sigma1=None
) -> np.ndarray:
    """Cloud points displaced by a 50/50 mixture of two isotropic Gaussians.

    The first component uses the per-point 10th-neighbour distance as its
    standard deviation, the second the global ``sigma2``. ``sigma1`` may be
    given to override the cached per-point values (scalar or per-point array).
    """
    rng = np.random.default_rng(rng)
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    s1 = cloud.sigma1 if sigma1 is None else np.broadcast_to(np.asarray(sigma1, float), (len(cloud),))
    idx = rng.integers(0, len(cloud), size=batch)
    pick_first = rng.random(batch) < 0.5
    std = np.where(pick_first, s1[idx], sigma2)
    noise = rng.standard_normal((batch, 3)) * std[:, None]
    return cloud.points[idx] + noise


def bounding_box(clouds, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    if len(clouds) == 0:
        raise ValueError("need at least one cloud")
    lo = np.min([c.points.min(axis=0) for c in clouds], axis=0) - margin
    hi = np.max([c.points.max(axis=0) for c in clouds], axis=0) + margin
    return lo, hi


def unit_box_scale(clouds) -> float:
    """Scale factor mapping the joint bounding box's longest side to 1."""
    lo, hi = bounding_box(clouds)
    return 1.0 / float(np.max(hi - lo))


# --- I/O -------------------------------------------------------------------


def write_ply(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props = []
    in_vertex = False
    for i, line in enumerate(text):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i + 1
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    if n is None or not {"x", "y", "z"} <= set(props):
        raise ValueError(f"{path}: no vertex element with x y z")
    cols = [props.index(c) for c in ("x", "y", "z")]
    rows = [line.split() for line in text[body:body + n]]
    if len(rows) < n or any(len(r) < len(props) for r in rows):
        raise ValueError(f"{path}: truncated vertex data")
    pts = np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64)
    return PointCloud(pts)


def write_xyz(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))


def read_xyz(path) -> PointCloud:
    return PointCloud(np.loadtxt(path, dtype=np.float64, ndmin=2)[:, :3])


def read_cloud(path) -> PointCloud:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)
