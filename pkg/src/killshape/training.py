"""Auto-decoder training with the deformation prior, test-time fitting and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import deformation as deform
from .diffnet import (
    DTYPE,
    LATENT_LR,
    NET_LR,
    AdamState,
    MlpConfig,
    ShapeNetwork,
    adam_step,
    derivative_bundle,
    geometric_init,
    param_gradient,
)
from .exceptions import DivergenceError, FormatError, NoValidSamples, NonFiniteError, VersionError
from .geometry import PointCloud, bounding_box, sample_recon_points, unsigned_distance
from .losses import (
    LossComponents,
    LossWeights,
    ReconBatch,
    Schedule,
    ad_reg,
    eikonal_loss,
    recon_loss,
    schedule_lambda_d,
    total_loss,
)
from .shapespace import (
    LatentTable,
    interpolate,
    latent_speed,
    project_to_levelset,
    sample_pairs,
)

logger = logging.getLogger(__name__)

MAGIC = b"NDFS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    A step reconstructs ``recon_batch`` shapes with ``recon_points`` queries
    each, and draws ``deform_batch`` latent-path samples with
    ``deform_points`` surface points each for the deformation and Eikonal
    terms. ``field_sharing`` is "draw" (one set of k fields per path sample)
    or "batch" (one set shared by the whole batch).
    """

    epochs: int = 2000
    recon_batch: int = 8
    recon_points: int = 128
    deform_batch: int = 8
    deform_points: int = 32
    interpolation: str = "linear"
    field_sharing: str = "batch"
    weights: LossWeights = LossWeights()
    schedule: Schedule = Schedule.constant(0.001)
    mlp: MlpConfig = MlpConfig()
    seed: int = 0
    checkpoint_every: int = 0
    sigma2: float = 0.3
    box_margin: float = 0.2
    newton_iters: int = 5
    projection_noise: float = 0.02
    net_lr: float = NET_LR
    latent_lr: float = LATENT_LR
    fit_with_ad: bool = False

    def __post_init__(self):
        for name in ("epochs", "recon_batch", "recon_points", "deform_batch", "deform_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.interpolation not in ("linear", "spiral"):
            raise ValueError(f"unknown interpolation mode {self.interpolation!r}")
        if self.field_sharing not in ("draw", "batch"):
            raise ValueError(f"unknown field sharing {self.field_sharing!r}")

    @property
    def k(self) -> int:
        return self.mlp.parts

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = [list(s) for s in self.schedule.steps]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["mlp"] = MlpConfig(**d.get("mlp", {}))
        if "schedule" in d:
            d["schedule"] = Schedule(tuple((int(a), float(b)) for a, b in d["schedule"]))
        return cls(**d)


def toy_preset(kind: str, lambda_d: float = 0.001, **overrides) -> TrainConfig:
    """Desk-scale preset for the toy datasets: k=1 for cubes, k=2 for figures.

    Fields are fitted per path sample ("draw"). With one field set shared by
    the whole batch the 8 unrelated paths cannot all be rigid at once, the
    deformation energy plateaus and the regularised models underfit.
    """
    k = 1 if kind == "cubes" else 2
    mlp = MlpConfig(parts=k)
    cfg = TrainConfig(mlp=mlp, schedule=Schedule.constant(lambda_d),
                      weights=LossWeights(lambda_d=lambda_d), field_sharing="draw")
    return dataclasses.replace(cfg, **overrides)


@dataclass
class Checkpoint:
    config: TrainConfig
    net: ShapeNetwork
    latents: LatentTable
    adam: AdamState
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    shape_losses: np.ndarray | None = None
    version: int = FORMAT_VERSION
    box: np.ndarray | None = None  # (2, 3) lower and upper corner of the training box

    def param_groups(self):
        return [list(self.net.parameters()), [self.latents.codes]]

    def clone(self) -> "Checkpoint":
        net = ShapeNetwork(self.config.mlp)
        net.load_state_dict(self.net.state_dict())
        adam = AdamState(
            lrs=list(self.adam.lrs), beta1=self.adam.beta1, beta2=self.adam.beta2,
            eps=self.adam.eps, step=self.adam.step,
            exp_avg=[[t.clone() for t in g] for g in self.adam.exp_avg],
            exp_avg_sq=[[t.clone() for t in g] for g in self.adam.exp_avg_sq],
        )
        return Checkpoint(
            self.config, net, LatentTable(self.latents.numpy(), self.latents.ids), adam,
            self.epoch, copy.deepcopy(self.rng_state),
            None if self.shape_losses is None else self.shape_losses.copy(), self.version,
            None if self.box is None else self.box.copy(),
        )


@dataclass
class EpochEvent:
    epoch: int
    losses: dict
    lambda_d: float
    rejected: int = 0
    deform_skipped: int = 0


class TrainingAborted(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init, main, deform_ss = ss.spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(main),
            np.random.default_rng(deform_ss))


def init_checkpoint(config: TrainConfig, n_shapes: int) -> Checkpoint:
    init_rng, main, deform_rng = _streams(config.seed)
    net = geometric_init(config.mlp, init_rng)
    latents = LatentTable.random(n_shapes, config.mlp.latent_dim, init_rng)
    adam = AdamState.for_groups(
        [list(net.parameters()), [latents.codes]], [config.net_lr, config.latent_lr]
    )
    rng_state = {"main": main.bit_generator.state, "deform": deform_rng.bit_generator.state}
    return Checkpoint(config, net, latents, adam, 0, rng_state)


def _rng_from_state(state) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def recon_batch(net, latents, clouds, shape_idx, config, rng) -> ReconBatch:
    qs, zs, ds, dgs, flags = [], [], [], [], []
    for i in shape_idx:
        q = sample_recon_points(clouds[i], config.recon_points, config.sigma2, rng)
        d, dg, on = unsigned_distance(q, clouds[i])
        qs.append(q)
        ds.append(d)
        dgs.append(dg)
        flags.append(on)
        zs.append(latents.codes[int(i)].expand(len(q), -1))
    t = lambda a: torch.as_tensor(np.concatenate(a), dtype=DTYPE)  # noqa: E731
    return ReconBatch(
        q=t(qs), z=torch.cat(zs), dist=t(ds), dist_grad=t(dgs),
        on_cloud=torch.as_tensor(np.concatenate(flags)),
    )


def deformation_term(net, z, eta, draws, box, config, rng):
    """Deformation loss for path samples (z, eta) of shape (n, D); returns (loss, rejected)."""
    P = config.deform_points
    lo, hi = box
    seeds = rng.uniform(lo, hi, size=(draws * P, 3))
    z_rep = z.repeat_interleave(P, dim=0)
    eta_rep = eta.repeat_interleave(P, dim=0)
    x, kept = project_to_levelset(
        net, z_rep, seeds, config.newton_iters, config.projection_noise, rng
    )
    kept_t = torch.as_tensor(kept)
    z_k, eta_k = z_rep[kept_t], eta_rep[kept_t]
    bundle = derivative_bundle(net, x, z_k, eta_k)
    probs = net.p(x, z_k)
    if config.field_sharing == "draw":
        group = kept_t // P
    else:
        group = torch.zeros(len(kept), dtype=torch.long)
    batch = deform.DeformationBatch(bundle, probs, z_k, eta_k, group)
    batch, dropped = batch.filter_valid()
    rejected = draws * P - len(kept) + dropped
    if len(batch) == 0:
        raise NoValidSamples("no valid deformation samples")
    # group ids must be contiguous for the solver
    _, batch.group = torch.unique(batch.group, return_inverse=True)
    fields = deform.solve_affine_fields(batch, config.k)
    return deform.deformation_loss(batch, fields), rejected


def _step(ckpt: Checkpoint, clouds, shape_idx, box, lambda_d, main, deform_rng, use_deformation):
    cfg = ckpt.config
    net, latents = ckpt.net, ckpt.latents
    rb = recon_batch(net, latents, clouds, shape_idx, cfg, main)
    comps = LossComponents(recon=recon_loss(net, rb, cfg.weights.sald_grad))

    draws = cfg.deform_batch
    path = sample_pairs(len(latents), draws, main)
    z1, z2 = latents.codes[path.i1], latents.codes[path.i2]
    t = torch.as_tensor(path.t, dtype=DTYPE)
    z = interpolate(z1, z2, t, cfg.interpolation)
    eta = latent_speed(z1, z2, t, cfg.interpolation)
    lo, hi = box
    y = main.uniform(lo, hi, size=(draws * cfg.deform_points, 3))
    comps.eikonal = eikonal_loss(net, z.repeat_interleave(cfg.deform_points, dim=0), box, points=y)
    comps.ad = ad_reg(latents.codes)

    rejected = skipped = 0
    if lambda_d > 0 and use_deformation:
        try:
            comps.deform, rejected = deformation_term(net, z, eta, draws, box, cfg, deform_rng)
        except NoValidSamples:
            logger.warning("epoch %d: no valid deformation samples; term set to 0", ckpt.epoch)
            skipped = 1
    loss = total_loss(comps, cfg.weights, lambda_d=lambda_d)
    groups = ckpt.param_groups()
    flat = param_gradient(loss, [p for g in groups for p in g])
    grads = [flat[: len(groups[0])], flat[len(groups[0]):]]
    if not adam_step(ckpt.adam, groups, grads):
        raise NonFiniteError("non-finite gradient")
    return comps.as_floats(), rejected, skipped


def train(
    clouds: list[PointCloud],
    config: TrainConfig,
    progress: Callable[[EpochEvent], None] | None = None,
    checkpoint: Checkpoint | None = None,
    checkpoint_path=None,
    use_deformation: bool = True,
    threads: int = 1,
) -> Checkpoint:
    """Train (or resume) the shape space; deterministic for a fixed seed.

    ``use_deformation=False`` never touches the deformation code path,
    whatever lambda_d is; with lambda_d = 0 both give identical runs.
    Bitwise reproducibility is only promised for ``threads=1``.
    """
    if len(clouds) < 2:
        raise ValueError("training needs at least two shapes")
    torch.set_num_threads(threads)
    ckpt = checkpoint or init_checkpoint(config, len(clouds))
    cfg = ckpt.config
    main = _rng_from_state(ckpt.rng_state["main"])
    deform_rng = _rng_from_state(ckpt.rng_state["deform"])
    box = bounding_box(clouds, cfg.box_margin)
    if ckpt.box is None:
        ckpt.box = np.stack(box)
    m = len(clouds)
    last_good = ckpt.clone()
    while ckpt.epoch < cfg.epochs:
        lambda_d = schedule_lambda_d(cfg.schedule, ckpt.epoch)
        order = main.permutation(m)
        sums: dict[str, float] = {}
        steps = rejected = skipped = 0
        try:
            for start in range(0, m, cfg.recon_batch):
                losses, rej, sk = _step(
                    ckpt, clouds, order[start:start + cfg.recon_batch], box, lambda_d,
                    main, deform_rng, use_deformation,
                )
                for key, v in losses.items():
                    sums[key] = sums.get(key, 0.0) + v
                steps += 1
                rejected += rej
                skipped += sk
        except NonFiniteError as exc:
            raise TrainingAborted(f"epoch {ckpt.epoch}: {exc}", last_good) from exc
        ckpt.epoch += 1
        ckpt.rng_state = {"main": main.bit_generator.state, "deform": deform_rng.bit_generator.state}
        event = EpochEvent(ckpt.epoch, {k: v / steps for k, v in sums.items()}, lambda_d,
                           rejected, skipped)
        if progress is not None:
            progress(event)
        last_good = ckpt.clone()
        if checkpoint_path and cfg.checkpoint_every and ckpt.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, checkpoint_path)
    ckpt.shape_losses = shape_recon_losses(ckpt, clouds)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


def _eval_recon(net, z, cloud, config, rng, n_points=2048):
    q = sample_recon_points(cloud, n_points, config.sigma2, rng)
    d, dg, on = unsigned_distance(q, cloud)
    rb = ReconBatch(
        q=torch.as_tensor(q), z=z.expand(len(q), -1), dist=torch.as_tensor(d),
        dist_grad=torch.as_tensor(dg), on_cloud=torch.as_tensor(on),
    )
    return recon_loss(net, rb, config.weights.sald_grad)


def shape_recon_losses(ckpt: Checkpoint, clouds, seed=12345) -> np.ndarray:
    """Reconstruction loss of every training shape at its code on a fixed sample."""
    out = []
    with torch.no_grad():
        for i, cloud in enumerate(clouds):
            rng = np.random.default_rng([seed, i])
            out.append(float(_eval_recon(ckpt.net, ckpt.latents.codes[i].detach(), cloud,
                                         ckpt.config, rng)))
    return np.array(out)


@dataclass
class FitResult:
    z: np.ndarray
    loss: float
    initial_loss: float
    diverged: bool = False


def fit_test_latent(
    ckpt: Checkpoint,
    cloud: PointCloud,
    steps: int = 500,
    seed: int = 0,
    lr: float | None = None,
    n_points: int | None = None,
    raise_on_divergence: bool = False,
) -> FitResult:
    """Optimise a fresh latent code for ``cloud`` with the network frozen.

    The objective is the reconstruction loss (plus lambda_ad |z|^2 when the
    config's ``fit_with_ad`` is set), evaluated on a fixed query sample.
    """
    torch.set_num_threads(1)
    cfg = ckpt.config
    rng = np.random.default_rng(seed)
    z = torch.as_tensor(rng.normal(0.0, 0.01, size=cfg.mlp.latent_dim), dtype=DTYPE)
    z.requires_grad_(True)
    n_points = n_points or max(cfg.recon_points * 8, 1024)
    q = sample_recon_points(cloud, n_points, cfg.sigma2, rng)
    d, dg, on = unsigned_distance(q, cloud)
    qt, dt, dgt, ont = (torch.as_tensor(a) for a in (q, d, dg, on))
    net = ckpt.net
    for p in net.parameters():
        p.requires_grad_(False)
    state = AdamState.for_groups([[z]], [lr or cfg.latent_lr])

    def objective():
        rb = ReconBatch(qt, z.expand(len(qt), -1), dt, dgt, ont)
        loss = recon_loss(net, rb, cfg.weights.sald_grad)
        if cfg.fit_with_ad:
            loss = loss + cfg.weights.lambda_ad * (z * z).sum()
        return loss

    try:
        loss = objective()
        initial = float(loss.detach())
        best_z, best = z.detach().clone(), initial
        diverged = False
        for _ in range(steps):
            grads = [param_gradient(loss, [z])]
            adam_step(state, [[z]], grads)
            loss = objective()
            cur = float(loss.detach())
            if cur < best:
                best, best_z = cur, z.detach().clone()
            if cur > 10 * initial:
                diverged = True
                logger.warning("latent fit diverged (loss %.3g from %.3g)", cur, initial)
                if raise_on_divergence:
                    raise DivergenceError(f"loss rose from {initial:.3g} to {cur:.3g}")
                break
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
    return FitResult(best_z.numpy(), best, initial, diverged)


# --- checkpoint file format --------------------------------------------------
# magic "NDFS", u32 version, u32 section count, then per section:
# u16 name length, name, u8 kind (0 = UTF-8 text, 1 = f64 tensor), u64 payload length, payload.
# Tensor payload: u32 ndim, ndim x u64 dims, little-endian f64 data.

_TEXT, _TENSOR = 0, 1


def _tensor_bytes(a) -> bytes:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _tensor_from(payload: bytes) -> np.ndarray:
    try:
        (ndim,) = struct.unpack_from("<I", payload, 0)
        dims = struct.unpack_from(f"<{ndim}Q", payload, 4)
    except struct.error as exc:
        raise FormatError("tensor header is truncated") from exc
    off = 4 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(payload) != off + 8 * count:
        raise FormatError("tensor payload size does not match its shape")
    return np.frombuffer(payload, dtype="<f8", offset=off, count=count).reshape(dims).copy()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sections: list[tuple[str, int, bytes]] = []
    meta = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "latent_ids": ckpt.latents.ids,
        "adam": {"lrs": ckpt.adam.lrs, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "step": ckpt.adam.step},
    }
    sections.append(("meta", _TEXT, json.dumps(meta, sort_keys=True).encode("utf-8")))
    for name, t in ckpt.net.state_dict().items():
        sections.append((f"net/{name}", _TENSOR, _tensor_bytes(t.detach().numpy())))
    sections.append(("latents", _TENSOR, _tensor_bytes(ckpt.latents.numpy())))
    for gi, (ms, vs) in enumerate(zip(ckpt.adam.exp_avg, ckpt.adam.exp_avg_sq)):
        for pi, (m, v) in enumerate(zip(ms, vs)):
            sections.append((f"adam/m/{gi}/{pi}", _TENSOR, _tensor_bytes(m.numpy())))
            sections.append((f"adam/v/{gi}/{pi}", _TENSOR, _tensor_bytes(v.numpy())))
    if ckpt.shape_losses is not None:
        sections.append(("shape_losses", _TENSOR, _tensor_bytes(ckpt.shape_losses)))
    if ckpt.box is not None:
        sections.append(("box", _TENSOR, _tensor_bytes(ckpt.box)))
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(sections)))
    for name, kind, payload in sections:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)))
        buf.write(payload)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def _read(buf: memoryview, off: int, n: int) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise FormatError("checkpoint file is truncated")
    return bytes(buf[off:off + n]), off + n


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    buf = memoryview(data)
    head, off = _read(buf, 0, 4) if len(data) >= 4 else (data, 0)
    if head != MAGIC:
        raise VersionError("not a checkpoint file (bad magic)")
    raw, off = _read(buf, off, 8)
    version, count = struct.unpack("<II", raw)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    text: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, off = _read(buf, off, 2)
        (nlen,) = struct.unpack("<H", raw)
        name, off = _read(buf, off, nlen)
        raw, off = _read(buf, off, 9)
        kind, plen = struct.unpack("<BQ", raw)
        payload, off = _read(buf, off, plen)
        key = name.decode("utf-8")
        if kind == _TEXT:
            text[key] = payload.decode("utf-8")
        elif kind == _TENSOR:
            tensors[key] = _tensor_from(payload)
        else:
            raise FormatError(f"unknown section kind {kind}")
    if off != len(data):
        raise FormatError("trailing bytes after the last section")
    if "meta" not in text:
        raise FormatError("missing meta section")
    try:
        return _assemble(json.loads(text["meta"]), tensors, version)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"incomplete checkpoint: missing or malformed {exc}") from exc


def _assemble(meta: dict, tensors: dict, version: int) -> Checkpoint:
    config = TrainConfig.from_dict(meta["config"])
    net = ShapeNetwork(config.mlp)
    state = {k[4:]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("net/")}
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"network tensors do not match the config: {exc}") from exc
    latents = LatentTable(tensors["latents"], meta["latent_ids"])
    a = meta["adam"]
    adam = AdamState(lrs=a["lrs"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    groups = [list(net.parameters()), [latents.codes]]
    for gi, g in enumerate(groups):
        adam.exp_avg.append([torch.as_tensor(tensors[f"adam/m/{gi}/{pi}"]) for pi in range(len(g))])
        adam.exp_avg_sq.append([torch.as_tensor(tensors[f"adam/v/{gi}/{pi}"]) for pi in range(len(g))])
    return Checkpoint(
        config, net, latents, adam, meta["epoch"], meta["rng_state"],
        tensors.get("shape_losses"), version, tensors.get("box"),
    )


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
