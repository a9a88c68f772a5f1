"""Latent codes, latent-path interpolation and level-set sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffnet import DTYPE, ShapeNetwork, as_tensor
from .exceptions import AntipodalLatent, NoValidSamples, ZeroLatent, ZeroSpeed

LATENT_INIT_STD = 0.01
PARALLEL_ANGLE = 1e-6
NEWTON_ITERS = 5
PROJECTION_NOISE = 0.02
GRAD_EPS = 1e-8


class LatentTable:
    """Learnable per-shape codes; row i belongs to ``ids[i]``."""

    def __init__(self, codes, ids=None):
        codes = as_tensor(codes).detach().clone()
        if codes.dim() != 2 or codes.shape[0] < 1:
            raise ValueError("codes must be a nonempty (m, D) array")
        if not torch.isfinite(codes).all():
            raise ValueError("latent codes must be finite")
        self.codes = codes.requires_grad_(True)
        self.ids = list(ids) if ids is not None else list(range(codes.shape[0]))
        if len(self.ids) != codes.shape[0]:
            raise ValueError("one id per code required")

    @classmethod
    def random(cls, m: int, dim: int, rng=None, std=LATENT_INIT_STD, ids=None) -> "LatentTable":
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, std, size=(m, dim)), ids)

    def __len__(self):
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def __getitem__(self, idx):
        return self.codes[idx]

    def index_of(self, shape_id) -> int:
        return self.ids.index(shape_id)

    def numpy(self) -> np.ndarray:
        return self.codes.detach().numpy().copy()


def interpolate_linear(z1, z2, t):
    z1, z2, t = _prep(z1, z2, t)
    return (1 - t) * z1 + t * z2


def _prep(z1, z2, t):
    z1 = as_tensor(z1)
    z2 = as_tensor(z2)
    t = as_tensor(t)
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    if t.dim() < z1.dim():
        t = t[..., None]
    return z1, z2, t


def _spiral_parts(z1, z2):
    r1 = torch.linalg.vector_norm(z1, dim=-1, keepdim=True)
    r2 = torch.linalg.vector_norm(z2, dim=-1, keepdim=True)
    if bool(((r1 == 0) | (r2 == 0)).any()):
        raise ZeroLatent("spiral interpolation needs nonzero endpoint codes")
    u1 = z1 / r1
    u2 = z2 / r2
    cos = torch.clamp((u1 * u2).sum(-1, keepdim=True), -1.0, 1.0)
    omega = torch.arccos(cos)
    if bool((omega > np.pi - PARALLEL_ANGLE).any()):
        raise AntipodalLatent("spiral interpolation undefined for antipodal codes")
    return r1, r2, u1, u2, omega


def _slerp_dir(u1, u2, omega, t):
    """Unit direction at t and its t-derivative; near-parallel falls back to normalised lerp."""
    parallel = omega < PARALLEL_ANGLE
    om = torch.where(parallel, torch.ones_like(omega), omega)
    sin = torch.sin(om)
    d_slerp = (torch.sin((1 - t) * om) * u1 + torch.sin(t * om) * u2) / sin
    dd_slerp = om * (torch.cos(t * om) * u2 - torch.cos((1 - t) * om) * u1) / sin
    lerp = (1 - t) * u1 + t * u2
    ln = torch.linalg.vector_norm(lerp, dim=-1, keepdim=True)
    d_lerp = lerp / ln
    diff = u2 - u1
    dd_lerp = (diff - d_lerp * (d_lerp * diff).sum(-1, keepdim=True)) / ln
    return torch.where(parallel, d_lerp, d_slerp), torch.where(parallel, dd_lerp, dd_slerp)


def interpolate_spiral(z1, z2, t):
    """Norm blended linearly, direction by slerp; exact endpoints at t = 0 and 1."""
    z1, z2, t = _prep(z1, z2, t)
    r1, r2, u1, u2, omega = _spiral_parts(z1, z2)
    d, _ = _slerp_dir(u1, u2, omega, t)
    out = ((1 - t) * r1 + t * r2) * d
    out = torch.where(t == 0, z1, out)
    return torch.where(t == 1, z2, out)


def latent_speed(z1, z2, t, mode="linear"):
    """Unit tangent dz/dt / |dz/dt| of the chosen interpolation at t."""
    z1, z2, t = _prep(z1, z2, t)
    if mode == "linear":
        vel = (z2 - z1).expand(torch.broadcast_shapes(z1.shape, t.shape))
    elif mode == "spiral":
        r1, r2, u1, u2, omega = _spiral_parts(z1, z2)
        d, dd = _slerp_dir(u1, u2, omega, t)
        vel = (r2 - r1) * d + ((1 - t) * r1 + t * r2) * dd
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    norm = torch.linalg.vector_norm(vel, dim=-1, keepdim=True)
    if bool((norm.detach() <= 1e-300).any()) or bool((z1 == z2).all(-1).any()):
        raise ZeroSpeed("latent path has zero speed (identical endpoints)")
    return vel / norm


def interpolate(z1, z2, t, mode="linear"):
    if mode == "linear":
        return interpolate_linear(z1, z2, t)
    if mode == "spiral":
        return interpolate_spiral(z1, z2, t)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def latent_velocity(z1, z2, t, mode="linear"):
    """Unnormalised dz/dt (used to measure deformation along a whole path)."""
    z1, z2, t = _prep(z1, z2, t)
    if mode == "linear":
        return (z2 - z1).expand(torch.broadcast_shapes(z1.shape, t.shape))
    r1, r2, u1, u2, omega = _spiral_parts(z1, z2)
    d, dd = _slerp_dir(u1, u2, omega, t)
    return (r2 - r1) * d + ((1 - t) * r1 + t * r2) * dd


@dataclass
class PathSamples:
    i1: np.ndarray
    i2: np.ndarray
    t: np.ndarray


def sample_pairs(m: int, n: int, rng) -> PathSamples:
    """n uniform ordered pairs (i1 != i2) and t ~ U[0, 1]."""
    if m < 2:
        raise ValueError("need at least two codes to sample pairs")
    i1 = rng.integers(0, m, size=n)
    i2 = rng.integers(0, m - 1, size=n)
    i2 = i2 + (i2 >= i1)
    t = rng.uniform(0.0, 1.0, size=n)
    return PathSamples(i1, i2, t)


def project_to_levelset(
    net: ShapeNetwork,
    z,
    seeds,
    iters: int = NEWTON_ITERS,
    noise_std: float = PROJECTION_NOISE,
    rng=None,
    eps: float = GRAD_EPS,
):
    """Generalised Newton steps p <- p - g f / |g|^2, then Gaussian jitter.

    Returns ``(points, kept)`` where ``kept`` indexes the seeds that never
    hit a gradient below ``eps``. ``net`` may also be a plain callable
    ``(points, z) -> (f, grad_x f)``.
    """
    value_and_grad = net.f.value_and_grad if isinstance(net, ShapeNetwork) else net
    if iters < 1:
        raise ValueError("iters must be >= 1")
    p = as_tensor(seeds).clone()
    z = as_tensor(z).detach()
    if z.dim() == 1 or z.shape[0] == 1:
        z = z.reshape(1, -1).expand(p.shape[0], -1)
    alive = torch.ones(p.shape[0], dtype=torch.bool)
    with torch.no_grad():
        for _ in range(iters):
            f, g = value_and_grad(p, z)
            gn2 = (g * g).sum(-1)
            alive &= gn2 >= eps * eps
            step = torch.where(alive, f / torch.where(alive, gn2, torch.ones_like(gn2)), 0.0)
            p = p - step[:, None] * g
    kept = torch.nonzero(alive).flatten().numpy()
    if kept.size == 0:
        raise NoValidSamples("every projection seed hit a vanishing gradient")
    p = p[alive]
    if noise_std > 0:
        rng = np.random.default_rng(rng)
        p = p + torch.as_tensor(rng.normal(0.0, noise_std, size=tuple(p.shape)), dtype=DTYPE)
    return p, kept
