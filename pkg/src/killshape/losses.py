"""Reconstruction (SALD), Eikonal and auto-decoder losses, and their weighting."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffnet import ShapeNetwork, as_tensor
from .exceptions import NonFiniteError

SALD_GRAD_WEIGHT = 0.1
LAMBDA_E = 0.1
LAMBDA_AD = 0.001
LAMBDA_D_TOY = 0.001


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = LAMBDA_D_TOY
    lambda_e: float = LAMBDA_E
    lambda_ad: float = LAMBDA_AD
    sald_grad: float = SALD_GRAD_WEIGHT

    def __post_init__(self):
        for name in ("lambda_d", "lambda_e", "lambda_ad", "sald_grad"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant lambda_d: ``steps`` holds (first_epoch, value) pairs."""

    steps: tuple[tuple[int, float], ...] = ((0, LAMBDA_D_TOY),)

    def __post_init__(self):
        thresholds = [t for t, _ in self.steps]
        if not thresholds:
            raise ValueError("schedule needs at least one step")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("schedule thresholds must be strictly increasing")

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls(((0, float(value)),))


STAGED_SCHEDULE = Schedule(((0, 0.0), (2000, 0.001), (4000, 0.0001)))
STAGED_SCHEDULE_LONG = Schedule(((0, 0.0), (20000, 0.001), (40000, 0.0001)))
TOY_SCHEDULE = Schedule.constant(LAMBDA_D_TOY)


def schedule_lambda_d(schedule: Schedule, epoch: int) -> float:
    thresholds = [t for t, _ in schedule.steps]
    i = bisect.bisect_right(thresholds, epoch) - 1
    if i < 0:
        return 0.0
    return schedule.steps[i][1]


def sald_tau(a, b, vector=None):
    """Sign-agnostic distance min(|a - b|, |a + b|).

    With ``vector`` the last axis holds 3-vectors and the Euclidean norm is
    used; by default a trailing axis of length 3 is read as vectors.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"tau needs matching shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if vector is None:
        vector = a.dim() >= 1 and a.shape[-1] == 3
    if vector:
        minus = torch.linalg.vector_norm(a - b, dim=-1)
        plus = torch.linalg.vector_norm(a + b, dim=-1)
    else:
        minus = torch.abs(a - b)
        plus = torch.abs(a + b)
    return torch.minimum(minus, plus)


@dataclass
class ReconBatch:
    """Query points with their latent codes and unsigned-distance targets."""

    q: torch.Tensor  # (B, 3)
    z: torch.Tensor  # (B, D), may carry gradient into the latent table
    dist: torch.Tensor  # (B,)
    dist_grad: torch.Tensor  # (B, 3)
    on_cloud: torch.Tensor  # (B,) bool; gradient term skipped there


def recon_loss(net: ShapeNetwork, batch: ReconBatch, sald_grad=SALD_GRAD_WEIGHT) -> torch.Tensor:
    if batch.q.shape[0] == 0:
        raise ValueError("empty reconstruction batch")
    f, g = net.f.value_and_grad(batch.q, batch.z)
    value_term = sald_tau(f, batch.dist, vector=False)
    grad_term = sald_tau(g, batch.dist_grad, vector=True)
    grad_term = torch.where(batch.on_cloud, torch.zeros_like(grad_term), grad_term)
    return (value_term + sald_grad * grad_term).mean()


def eikonal_loss(net: ShapeNetwork, z, box, n=None, rng=None, points=None) -> torch.Tensor:
    """Mean (|grad_x f(y_i, z_i)| - 1)^2 with y_i uniform in ``box``.

    ``z`` is (n, D) (one code per sample) or (D,) shared; ``points`` skips sampling.
    """
    z = as_tensor(z)
    if points is None:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in box)
        count = n if n is not None else (z.shape[0] if z.dim() == 2 else 1)
        rng = np.random.default_rng(rng)
        points = rng.uniform(lo, hi, size=(count, 3))
    y = as_tensor(points)
    if z.dim() == 1:
        z = z.expand(y.shape[0], -1)
    _, g = net.f.value_and_grad(y, z)
    return ((torch.linalg.vector_norm(g, dim=-1) - 1) ** 2).mean()


def ad_reg(latents) -> torch.Tensor:
    z = as_tensor(latents)
    if z.dim() != 2 or z.shape[0] < 1:
        raise ValueError("latent table must be a nonempty (m, D) array")
    return (z * z).sum(1).mean()


@dataclass
class LossComponents:
    recon: torch.Tensor
    deform: torch.Tensor | float = 0.0
    eikonal: torch.Tensor | float = 0.0
    ad: torch.Tensor | float = 0.0
    extras: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        val = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)  # noqa: E731
        return {
            "recon": val(self.recon),
            "deform": val(self.deform),
            "eikonal": val(self.eikonal),
            "ad": val(self.ad),
        }


def total_loss(components: LossComponents, weights: LossWeights, lambda_d=None):
    """loss_r + lambda_d loss_d + lambda_e loss_e + lambda_ad loss_ad."""
    lambda_d = weights.lambda_d if lambda_d is None else lambda_d
    for name, value in components.as_floats().items():
        if not math.isfinite(value):
            raise NonFiniteError(f"loss component '{name}' is not finite ({value})")
    total = components.recon
    if lambda_d != 0:
        total = total + lambda_d * components.deform
    if weights.lambda_e != 0:
        total = total + weights.lambda_e * components.eikonal
    if weights.lambda_ad != 0:
        total = total + weights.lambda_ad * components.ad
    return total
