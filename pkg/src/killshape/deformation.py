"""Consistent deformation fields and the piecewise-rigid Killing prior.

For a point x on the level set of f(., z) and a latent velocity eta, every
velocity v with  grad_x f . v + (df/dz) eta = 0  keeps x on the moving
surface. Those velocities are  v = w + P u  with the particular solution
w = -(s / |g|^2) g  and the tangent projector  P = I - g g^T / |g|^2.
Restricting u to affine fields u(x) = A x + b makes the Killing energy
|grad v + grad v^T|_F^2 a quadratic in (A, b), which is minimised per
part by weighted linear least squares. The minimisers are returned frozen
so that the loss gradient with respect to the network is taken with the
fields held fixed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch

from .diffnet import DTYPE, DerivativeBundle, as_tensor
from .exceptions import DegenerateGradient, NoValidSamples

logger = logging.getLogger(__name__)

GRAD_EPS = 1e-8
TIKHONOV = 1e-9
N_UNKNOWNS = 12

_token = itertools.count(1)


@dataclass
class AffineField:
    """u(x) = A x + b. ``frozen`` fields never carry gradient."""

    A: torch.Tensor
    b: torch.Tensor
    frozen: bool = False

    def __post_init__(self):
        self.A = as_tensor(self.A)
        self.b = as_tensor(self.b)
        if self.frozen:
            self.A = self.A.detach()
            self.b = self.b.detach()
        if not (torch.isfinite(self.A).all() and torch.isfinite(self.b).all()):
            raise ValueError("affine field has non-finite entries")

    def __call__(self, x):
        return x @ self.A.T + self.b

    def as_vector(self) -> np.ndarray:
        """Column-major vec(A) followed by b."""
        return np.concatenate(
            [self.A.detach().numpy().reshape(3, 3).T.ravel(), self.b.detach().numpy()]
        )

    @classmethod
    def from_vector(cls, theta, frozen=False) -> "AffineField":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:9].reshape(3, 3).T.copy(), theta[9:].copy(), frozen=frozen)


def _check_gradient(bundle: DerivativeBundle, eps=GRAD_EPS):
    gn = torch.linalg.norm(bundle.g.detach(), dim=-1)
    if bool((gn < eps).any()):
        raise DegenerateGradient(f"|grad_x f| below {eps:g} at {(gn < eps).sum().item()} point(s)")


def particular_solution_w(bundle: DerivativeBundle) -> torch.Tensor:
    _check_gradient(bundle)
    g = bundle.g
    c = bundle.s / (g * g).sum(-1)
    return -c[..., None] * g


def projector_P(bundle: DerivativeBundle) -> torch.Tensor:
    _check_gradient(bundle)
    g = bundle.g
    gg = g[..., :, None] * g[..., None, :]
    eye = torch.eye(3, dtype=g.dtype)
    return eye - gg / (g * g).sum(-1)[..., None, None]


def consistent_field_v(bundle: DerivativeBundle, u) -> torch.Tensor:
    u = as_tensor(u)
    w = particular_solution_w(bundle)
    P = projector_P(bundle)
    return w + (P @ u[..., None])[..., 0]


@dataclass
class _FieldTerms:
    """Per-point pieces of grad_x v that do not depend on (A, b)."""

    grad_w: torch.Tensor  # (N, 3, 3), [i, k] = d w_i / d x_k
    P: torch.Tensor  # (N, 3, 3)
    n: torch.Tensor  # (N, 3) unit normal
    K: torch.Tensor  # (N, 3, 3), [i, k] = d n_i / d x_k = (P H)_ik / |g|
    x: torch.Tensor  # (N, 3)


def _field_terms(bundle: DerivativeBundle) -> _FieldTerms:
    _check_gradient(bundle)
    g, s, H, m = bundle.g, bundle.s, bundle.H, bundle.m
    gn2 = (g * g).sum(-1)
    gn = torch.sqrt(gn2)
    c = s / gn2
    Hg = (H @ g[..., None])[..., 0]
    grad_c = m / gn2[..., None] - 2 * (s / gn2**2)[..., None] * Hg
    grad_w = -(g[..., :, None] * grad_c[..., None, :] + c[..., None, None] * H)
    n = g / gn[..., None]
    P = torch.eye(3, dtype=g.dtype) - n[..., :, None] * n[..., None, :]
    K = (P @ H) / gn[..., None, None]
    return _FieldTerms(grad_w, P, n, K, bundle.x)


def _dP_action(terms: _FieldTerms, q: torch.Tensor) -> torch.Tensor:
    """[(D_x P) q]_ik = sum_j d P_ij / d x_k q_j; q may carry extra dims after N."""
    extra = q.dim() - 2
    view = lambda t: t.reshape(t.shape[:1] + (1,) * extra + t.shape[1:])  # noqa: E731
    n, K = view(terms.n), view(terms.K)
    nq = (n * q).sum(-1)
    qK = (q[..., None, :] @ K)[..., 0, :]
    return -(nq[..., None, None] * K + n[..., :, None] * qK[..., None, :])


def _jacobian_linear_part(terms: _FieldTerms, A, b, per_point=False) -> torch.Tensor:
    """(D_x P)(A x + b) + P A.

    A is (*E, 3, 3) and b (*E, 3) shared by all points, or, with
    ``per_point``, (N, *E, 3, 3) and (N, *E, 3). Result is (N, *E, 3, 3).
    """
    n_pts = terms.x.shape[0]
    extra = A.dim() - 2 - (1 if per_point else 0)
    if not per_point:
        A = A.expand((n_pts,) + A.shape)
        b = b.expand((n_pts,) + b.shape)
    lead = (n_pts,) + (1,) * extra
    x = terms.x.reshape(lead + (3,))
    q = (A @ x[..., None])[..., 0] + b
    P = terms.P.reshape(lead + (3, 3))
    return _dP_action(terms, q) + P @ A


def jacobian_v(bundle: DerivativeBundle, field: AffineField) -> torch.Tensor:
    """grad_x v for v = w + P (A x + b), rows = components, columns = d/dx_k."""
    terms = _field_terms(bundle)
    return terms.grad_w + _jacobian_linear_part(terms, field.A, field.b)


def grad_w(bundle: DerivativeBundle) -> torch.Tensor:
    return _field_terms(bundle).grad_w


def dP_action(bundle: DerivativeBundle, q) -> torch.Tensor:
    return _dP_action(_field_terms(bundle), as_tensor(q))


def killing_energy(J) -> torch.Tensor:
    J = as_tensor(J)
    S = J + J.transpose(-1, -2)
    return (S * S).sum((-1, -2))


# --- samples and the weighted least-squares problem -------------------------


@dataclass
class DeformationBatch:
    """Samples (z_i, eta_i, x_i) with their derivative bundles and part probabilities.

    ``group`` assigns each sample to a field set; samples in the same group
    share one set of k affine fields.
    """

    bundle: DerivativeBundle
    probs: torch.Tensor
    z: torch.Tensor | None = None
    eta: torch.Tensor | None = None
    group: torch.Tensor | None = None
    token: int = field(default_factory=lambda: next(_token))

    def __post_init__(self):
        n = len(self.bundle)
        if self.probs.shape[0] != n:
            raise ValueError("probs and bundle sizes differ")
        if self.group is None:
            self.group = torch.zeros(n, dtype=torch.long)
        if self.eta is not None:
            norms = torch.linalg.norm(self.eta.detach(), dim=-1)
            if bool((torch.abs(norms - 1) > 1e-9).any()):
                raise ValueError("latent directions eta must be unit vectors")

    def __len__(self):
        return len(self.bundle)

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.group.max().item()) + 1 if len(self) else 0

    def filter_valid(self, eps=GRAD_EPS) -> tuple["DeformationBatch", int]:
        """Drop samples whose spatial gradient is below ``eps``; returns (batch, n_dropped)."""
        keep = torch.linalg.norm(self.bundle.g.detach(), dim=-1) >= eps
        dropped = int((~keep).sum().item())
        if dropped == 0:
            return self, 0
        pick = lambda t: None if t is None else t[keep]  # noqa: E731
        return (
            DeformationBatch(
                self.bundle.select(keep), self.probs[keep], pick(self.z), pick(self.eta),
                self.group[keep], token=self.token,
            ),
            dropped,
        )


@dataclass
class SolvedFields:
    """Frozen minimising fields: A (G, k, 3, 3), b (G, k, 3) for G groups and k parts."""

    A: torch.Tensor
    b: torch.Tensor
    token: int
    frozen: bool = True

    def __post_init__(self):
        if self.frozen:
            self.A = self.A.detach()
            self.b = self.b.detach()

    def field(self, j: int, group: int = 0) -> AffineField:
        return AffineField(self.A[group, j], self.b[group, j], frozen=self.frozen)

    def __len__(self):
        return self.A.shape[1]


_SYM_BASIS_A = torch.zeros(N_UNKNOWNS, 3, 3, dtype=DTYPE)
_SYM_BASIS_B = torch.zeros(N_UNKNOWNS, 3, dtype=DTYPE)
for _l in range(9):
    # column-major: vec index l = col * 3 + row
    _SYM_BASIS_A[_l, _l % 3, _l // 3] = 1.0
for _l in range(3):
    _SYM_BASIS_B[9 + _l, _l] = 1.0


def ls_system_terms(bundle: DerivativeBundle):
    """Per-sample residual model  vec(J + J^T) = r0 + M theta  with theta = (vec A, b).

    Returns ``(M, r0)`` of shapes (N, 9, 12) and (N, 9).
    """
    terms = _field_terms(bundle)
    lin = _jacobian_linear_part(terms, _SYM_BASIS_A, _SYM_BASIS_B)  # (N, 12, 3, 3)
    sym = lin + lin.transpose(-1, -2)
    M = sym.reshape(sym.shape[0], N_UNKNOWNS, 9).transpose(1, 2)
    r0 = terms.grad_w + terms.grad_w.transpose(-1, -2)
    return M, r0.reshape(-1, 9)


def normal_equations(batch: DeformationBatch, n_groups=None):
    """Normal matrices (G, k, 12, 12) and right-hand sides (G, k, 12), loss-normalised by n."""
    with torch.no_grad():
        bundle = batch.bundle.detach()
        M, r0 = ls_system_terms(bundle)
        p = batch.probs.detach()
        G = n_groups or batch.n_groups
        onehot = torch.nn.functional.one_hot(batch.group, G).to(DTYPE)
        w = onehot[:, :, None] * p[:, None, :] / len(batch)  # (N, G, k)
        MtM = M.transpose(1, 2) @ M
        Mtr = (M.transpose(1, 2) @ r0[..., None])[..., 0]
        normal = torch.einsum("ngk,nab->gkab", w, MtM)
        rhs = -torch.einsum("ngk,na->gka", w, Mtr)
    return normal.numpy(), rhs.numpy()


def solve_spd(normal: np.ndarray, rhs: np.ndarray, damping=TIKHONOV) -> np.ndarray:
    """Solve (N + damping I) x = rhs by Cholesky, falling back to LDL^T."""
    mat = normal + damping * np.eye(normal.shape[0])
    try:
        c = scipy.linalg.cho_factor(mat, lower=True, check_finite=True)
        return scipy.linalg.cho_solve(c, rhs)
    except np.linalg.LinAlgError:
        logger.debug("Cholesky failed; falling back to LDL^T")
        lu, d, perm = scipy.linalg.ldl(mat, lower=True)
        y = scipy.linalg.solve_triangular(lu[perm], rhs[perm], lower=True, unit_diagonal=True)
        y = np.linalg.lstsq(d, y, rcond=None)[0]
        x = np.empty_like(rhs)
        x[perm] = scipy.linalg.solve_triangular(
            lu[perm].T, y, lower=False, unit_diagonal=True
        )
        return x


def solve_affine_fields(
    batch: DeformationBatch, k: int | None = None, damping=TIKHONOV
) -> SolvedFields:
    """Per group and part, the (A, b) minimising the probability-weighted Killing energy."""
    if len(batch) == 0:
        raise NoValidSamples("no deformation samples")
    k = batch.k if k is None else k
    if k != batch.k:
        raise ValueError(f"batch has {batch.k} part probabilities, k={k} requested")
    normal, rhs = normal_equations(batch)
    G = normal.shape[0]
    theta = np.empty((G, k, N_UNKNOWNS))
    for g in range(G):
        for j in range(k):
            theta[g, j] = solve_spd(normal[g, j], rhs[g, j], damping)
    A = torch.as_tensor(theta[..., :9].reshape(G, k, 3, 3).transpose(0, 1, 3, 2).copy())
    b = torch.as_tensor(theta[..., 9:].copy())
    return SolvedFields(A, b, token=batch.token)


def piece_energies(batch: DeformationBatch, fields: SolvedFields) -> torch.Tensor:
    """Killing energy of every sample under every part's field, shape (N, k)."""
    terms = _field_terms(batch.bundle)
    A = fields.A[batch.group]  # (N, k, 3, 3)
    b = fields.b[batch.group]
    if fields.frozen:
        A, b = A.detach(), b.detach()
    J = terms.grad_w[:, None] + _jacobian_linear_part(terms, A, b, per_point=True)
    return killing_energy(J)


def deformation_loss(batch: DeformationBatch, fields: SolvedFields) -> torch.Tensor:
    """(1/n) sum_j sum_i p_j(x_i) rho(x_i; v_j), differentiable w.r.t. the network."""
    if fields.token != batch.token:
        raise ValueError("fields were solved on a different sample batch")
    if len(fields) != batch.k:
        raise ValueError("number of fields does not match the number of parts")
    rho = piece_energies(batch, fields)
    return (batch.probs * rho).sum() / len(batch)
