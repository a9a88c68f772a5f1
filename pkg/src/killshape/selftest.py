"""Quick analytic oracle checks run by ``killshape selftest``."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import deformation as deform
from .diffnet import DTYPE, DerivativeBundle, MlpConfig, derivative_bundle, geometric_init
from .evaluation import chamfer, wasserstein
from .shapespace import interpolate_spiral


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def translating_sphere_bundle(x, eta) -> DerivativeBundle:
    """Exact derivatives of f(x, t) = |x - t eta|^2 - 1 at t = 0 (latent t is scalar)."""
    x = torch.as_tensor(x, dtype=DTYPE)
    eta = torch.as_tensor(eta, dtype=DTYPE)
    n = len(x)
    return DerivativeBundle(
        x=x,
        f=(x * x).sum(1) - 1,
        g=2 * x,
        s=-2 * (x @ eta),
        H=2 * torch.eye(3, dtype=DTYPE).expand(n, 3, 3).clone(),
        m=(-2 * eta).expand(n, 3).clone(),
    )


def random_net(rng, config=None, jitter=0.05):
    """Geometric init plus weight noise so derivatives are generic."""
    net = geometric_init(config or MlpConfig(), rng)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(jitter * torch.as_tensor(rng.normal(size=tuple(p.shape)), dtype=DTYPE))
    return net


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def check_sphere(rng) -> CheckResult:
    x = _unit(rng.normal(size=(1000, 3)))
    eta = _unit(rng.normal(size=3))
    bundle = translating_sphere_bundle(x, eta)
    w_err = float(np.abs(deform.particular_solution_w(bundle).numpy() - (x @ eta)[:, None] * x).max())
    batch = deform.DeformationBatch(bundle, torch.ones(len(x), 1, dtype=DTYPE))
    fields = deform.solve_affine_fields(batch)
    b_err = float(np.abs(fields.b[0, 0].numpy() - eta).max())
    a_norm = float(torch.linalg.norm(fields.A[0, 0]))
    loss = float(deform.deformation_loss(batch, fields))
    ok = w_err < 1e-12 and b_err < 1e-6 and a_norm < 1e-6 and loss < 1e-10
    return CheckResult("translating sphere", ok,
                       f"|w err|={w_err:.1e} |b-eta|={b_err:.1e} |A|={a_norm:.1e} loss={loss:.1e}")


def check_consistency(rng, probes=1000) -> CheckResult:
    net = random_net(rng)
    D = net.config.latent_dim
    x = rng.uniform(-1, 1, size=(probes, 3))
    z = rng.normal(0, 0.3, size=(probes, D))
    eta = _unit(rng.normal(size=(probes, D)))
    u = rng.normal(size=(probes, 3))
    with torch.no_grad():
        b = derivative_bundle(net, x, z, eta)
        v = deform.consistent_field_v(b, torch.as_tensor(u))
        res = (b.g * v).sum(1) + b.s
        scale = torch.linalg.norm(b.g, dim=1) * torch.linalg.norm(v, dim=1) + b.s.abs()
    worst = float((res.abs() / scale).max())
    return CheckResult("consistency g.v + s = 0", worst < 1e-9, f"max rel residual {worst:.1e}")


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def check_finite_differences(rng, probes=20, h=1e-5) -> CheckResult:
    net = random_net(rng)
    D = net.config.latent_dim
    worst = {}
    for _ in range(probes):
        x = rng.uniform(-1, 1, size=(1, 3))
        z = rng.normal(0, 0.3, size=(1, D))
        eta = _unit(rng.normal(size=(1, D)))
        field = deform.AffineField(rng.normal(size=(3, 3)), rng.normal(size=3))
        with torch.no_grad():
            b = derivative_bundle(net, x, z, eta)
            J = deform.jacobian_v(b, field).numpy()[0]

            def at(xx):
                bb = derivative_bundle(net, xx, z, eta)
                return bb, deform.consistent_field_v(bb, field(torch.as_tensor(xx)))

            cols = {"g": [], "H": [], "m": [], "v": []}
            for e in np.eye(3):
                bp, vp = at(x + h * e)
                bm, vm = at(x - h * e)
                cols["g"].append((bp.f - bm.f).numpy() / (2 * h))
                cols["H"].append((bp.g - bm.g).numpy()[0] / (2 * h))
                cols["m"].append((bp.s - bm.s).numpy() / (2 * h))
                cols["v"].append((vp - vm).numpy()[0] / (2 * h))
        errs = {
            "g": _rel(b.g.numpy()[0], np.concatenate(cols["g"])),
            "H": _rel(b.H.numpy()[0], np.stack(cols["H"], axis=1)),
            "m": _rel(b.m.numpy()[0], np.concatenate(cols["m"])),
            "grad v": _rel(J, np.stack(cols["v"], axis=1)),
        }
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    ok = all(v < 1e-3 for v in worst.values())
    return CheckResult("finite differences", ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def check_killing(rng, trials=100) -> CheckResult:
    rigid = []
    other = []
    for _ in range(trials):
        S = rng.normal(size=(3, 3))
        rigid.append(float(deform.killing_energy(torch.as_tensor(S - S.T))))
        R = rng.normal(size=(3, 3))
        other.append(float(deform.killing_energy(torch.as_tensor(S - S.T + R + R.T))))
    ok = max(rigid) == 0.0 and min(other) > 1e-6
    return CheckResult("Killing energy", ok, f"max rigid={max(rigid):.1e} min non-rigid={min(other):.1e}")


def check_metrics(rng) -> CheckResult:
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
    d = ((a[:, None] - b[None]) ** 2).sum(-1)
    brute = 0.5 * (d.min(1).mean() + d.min(0).mean())
    c_err = abs(chamfer(a, b) - brute)
    w_err = 0.0
    for n in range(1, 7):
        p, q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        cost = np.linalg.norm(p[:, None] - q[None], axis=-1)
        best = min(cost[np.arange(n), list(perm)].sum() for perm in itertools.permutations(range(n)))
        w_err = max(w_err, abs(wasserstein(p, q) - best))
    ok = c_err < 1e-12 and w_err < 1e-12
    return CheckResult("metric oracles", ok, f"chamfer err={c_err:.1e} wasserstein err={w_err:.1e}")


def check_spiral_norm(rng, n=1000) -> CheckResult:
    z1, z2 = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    t = rng.uniform(size=n)
    z = interpolate_spiral(z1, z2, t).numpy()
    want = (1 - t) * np.linalg.norm(z1, axis=1) + t * np.linalg.norm(z2, axis=1)
    err = float(np.abs(np.linalg.norm(z, axis=1) - want).max())
    return CheckResult("spiral norm blend", err < 1e-9, f"max err {err:.1e}")


CHECKS = (check_sphere, check_consistency, check_finite_differences, check_killing,
          check_metrics, check_spiral_norm)


def run(seed: int = 0) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        start = time.perf_counter()
        try:
            res = check(np.random.default_rng(seed))
        except Exception as exc:  # a crashing check is a failed check
            res = CheckResult(check.__name__, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results
