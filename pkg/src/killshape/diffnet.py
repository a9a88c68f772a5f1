"""Implicit network f(x, z), part network p(x, z), their spatial jets and Adam.

Spatial derivatives are propagated forward through every layer
(Taylor mode): each neuron carries its value, its 3-vector x-gradient,
its 3x3 x-Hessian, its derivative along a latent direction eta and the
x-gradient of that directional derivative. Parameter gradients are then
obtained with a single reverse pass (torch autograd) over this augmented
graph, so no nested reverse-mode differentiation is needed.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .exceptions import NonFiniteError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of the implicit and part networks.

    ``skip_layer`` is the index of the linear layer whose input is the
    concatenation of the previous activations with the raw input (x, z).
    """

    hidden_layers: int = 4
    hidden_width: int = 64
    latent_dim: int = 8
    skip_layer: int = 2
    softplus_beta: float = 100.0
    geometric_init_radius: float = 1.0
    parts: int = 1
    part_hidden: int = 128

    def __post_init__(self):
        if self.hidden_layers < 2:
            raise ValueError("hidden_layers must be >= 2")
        if not 0 < self.skip_layer < self.hidden_layers:
            raise ValueError("skip_layer must lie strictly inside the layer stack")
        if self.hidden_width <= 3 + self.latent_dim:
            raise ValueError("hidden_width must exceed the input width 3 + latent_dim")
        if not self.softplus_beta > 0:
            raise ValueError("softplus_beta must be positive")
        if self.latent_dim < 1 or self.parts < 1 or self.part_hidden < 1:
            raise ValueError("latent_dim, parts and part_hidden must be positive")


FULL_SCALE_MLP = MlpConfig(
    hidden_layers=8, hidden_width=512, latent_dim=256, skip_layer=4, parts=20
)
DESK_MLP = MlpConfig()


def softplus_jet(a: torch.Tensor, beta: float):
    """Softplus value and first two derivatives, overflow-safe for large beta*a."""
    ba = beta * a
    value = softplus(a, beta)
    d1 = torch.sigmoid(ba)
    d2 = beta * d1 * (1 - d1)
    return value, d1, d2


# past beta*a = 40 the log1p(exp(-beta*a)) correction is below float64 resolution
SOFTPLUS_THRESHOLD = 40.0


def softplus(a: torch.Tensor, beta: float) -> torch.Tensor:
    return F.softplus(a, beta, SOFTPLUS_THRESHOLD)


# packed upper triangle of a symmetric 3x3 matrix
SYM_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
_UNPACK = (0, 1, 2, 1, 3, 4, 2, 4, 5)
_PAIR_I = torch.tensor([i for i, _ in SYM_PAIRS])
_PAIR_J = torch.tensor([j for _, j in SYM_PAIRS])
_CHANNELS = {"value": 1, "jac": 3, "hess": 6, "dir": 1, "dir_grad": 3}


@functools.lru_cache(maxsize=None)
def _jet_layout(order: int, directional: bool):
    names = ["value"] + (["jac"] if order >= 1 else []) + (["hess"] if order >= 2 else [])
    if directional:
        names += ["dir"] + (["dir_grad"] if order >= 1 else [])
    sizes = [_CHANNELS[n] for n in names]
    return names, sizes, dict(zip(names, np.cumsum([0] + sizes[:-1]).tolist()))


@functools.lru_cache(maxsize=None)
def _value_mask(channels: int) -> torch.Tensor:
    mask = torch.zeros(channels, 1, dtype=DTYPE)
    mask[0] = 1.0
    return mask


class Jet:
    """Per-neuron value and derivatives, stacked as channels of one (N, C, W) tensor.

    Channels, in order: value; x-gradient (3) if order >= 1; packed x-Hessian
    (6) if order >= 2; derivative along the latent direction eta and, for
    order >= 1, its x-gradient (3). Stacking lets each linear layer act on
    every channel with a single matmul.
    """

    def __init__(self, data: torch.Tensor, order: int, directional: bool):
        self.data = data
        self.order = order
        self.directional = directional
        self._names, self._sizes, self._offsets = _jet_layout(order, directional)

    def _channel(self, name):
        if name not in self._offsets:
            return None
        off = self._offsets[name]
        return self.data[:, off:off + _CHANNELS[name]]

    @property
    def value(self):
        return self.data[:, 0]

    @property
    def jac(self):
        return self._channel("jac")

    @property
    def hess_packed(self):
        return self._channel("hess")

    @property
    def dir(self):
        d = self._channel("dir")
        return None if d is None else d[:, 0]

    @property
    def dir_grad(self):
        return self._channel("dir_grad")

    def _like(self, data) -> "Jet":
        return Jet(data, self.order, self.directional)

    def linear(self, weight, bias=None) -> "Jet":
        out = self.data @ weight.T
        if bias is not None:
            # the bias only shifts the value channel
            out = out + _value_mask(out.shape[1]) * bias
        return self._like(out)

    def softplus(self, beta: float) -> "Jet":
        # one split per layer: slicing channel by channel makes autograd
        # allocate a zero gradient of the full stack for every slice
        ch = dict(zip(self._names, torch.split(self.data, self._sizes, dim=1)))
        a = ch["value"].squeeze(1)
        v, d1, d2 = softplus_jet(a, beta)
        d1c, d2c = d1[:, None], d2[:, None]
        parts = [v[:, None]]
        jac = ch.get("jac")
        if jac is not None:
            parts.append(d1c * jac)
        if "hess" in ch:
            outer = jac[:, _PAIR_I] * jac[:, _PAIR_J]
            parts.append(d2c * outer + d1c * ch["hess"])
        if self.directional:
            dz = ch["dir"]
            parts.append(d1c * dz)
            if "dir_grad" in ch:
                parts.append((d2c * dz) * jac + d1c * ch["dir_grad"])
        return self._like(torch.cat(parts, dim=1))

    def cat(self, other: "Jet", scale: float) -> "Jet":
        return self._like(torch.cat([self.data, other.data], dim=2) * scale)

    def hessian(self) -> torch.Tensor:
        """Unpacked (N, W, 3, 3) Hessian; symmetric entries are the same numbers."""
        h = self.hess_packed[:, list(_UNPACK)]
        return h.permute(0, 2, 1).reshape(h.shape[0], h.shape[2], 3, 3)


def input_jet(x: torch.Tensor, z: torch.Tensor, order: int, eta=None) -> Jet:
    n = x.shape[0]
    D = z.shape[1]
    parts = [torch.cat([x, z], dim=1)[:, None]]
    if order >= 1:
        eye = torch.eye(3, dtype=x.dtype).expand(n, 3, 3)
        parts.append(torch.cat([eye, x.new_zeros(n, 3, D)], dim=2))
    if order >= 2:
        parts.append(x.new_zeros(n, 6, 3 + D))
    if eta is not None:
        parts.append(torch.cat([x.new_zeros(n, 3), eta], dim=1)[:, None])
        if order >= 1:
            parts.append(x.new_zeros(n, 3, 3 + D))
    return Jet(torch.cat(parts, dim=1), order, eta is not None)


@dataclass
class DerivativeBundle:
    """First and second derivative quantities of f at a batch of points.

    f (N,), g = grad_x f (N, 3), s = (df/dz) eta (N,), H = Hessian_xx f (N, 3, 3),
    m = grad_x s (N, 3). ``x`` keeps the evaluation points.
    """

    x: torch.Tensor
    f: torch.Tensor
    g: torch.Tensor
    s: torch.Tensor | None = None
    H: torch.Tensor | None = None
    m: torch.Tensor | None = None

    def __len__(self):
        return self.f.shape[0]

    def select(self, mask) -> "DerivativeBundle":
        pick = lambda t: None if t is None else t[mask]  # noqa: E731
        return DerivativeBundle(
            pick(self.x), pick(self.f), pick(self.g), pick(self.s), pick(self.H), pick(self.m)
        )

    def detach(self) -> "DerivativeBundle":
        det = lambda t: None if t is None else t.detach()  # noqa: E731
        return DerivativeBundle(
            det(self.x), det(self.f), det(self.g), det(self.s), det(self.H), det(self.m)
        )


class ImplicitNetwork(nn.Module):
    """SoftPlus MLP f(x, z) with one skip connection from the input."""

    def __init__(self, config: MlpConfig):
        super().__init__()
        self.config = config
        d_in = 3 + config.latent_dim
        W = config.hidden_width
        layers = []
        in_dim = d_in
        for i in range(config.hidden_layers + 1):
            out_dim = 1 if i == config.hidden_layers else W
            if i + 1 == config.skip_layer:
                out_dim = W - d_in
            layers.append(nn.Linear(in_dim, out_dim, dtype=DTYPE))
            in_dim = out_dim + d_in if i + 1 == config.skip_layer else out_dim
        self.layers = nn.ModuleList(layers)

    def jet(self, x, z, order: int = 0, eta=None, check_finite=False) -> Jet:
        cfg = self.config
        inp = input_jet(x, z, order, eta)
        h = inp
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            if i == cfg.skip_layer:
                h = h.cat(inp, 1 / math.sqrt(2))
            h = h.linear(lin.weight, lin.bias)
            if i < last:
                h = h.softplus(cfg.softplus_beta)
            if check_finite and not torch.isfinite(h.data).all():
                raise NonFiniteError(f"non-finite activation at layer {i}")
        return h

    def forward(self, x, z):
        cfg = self.config
        inp = torch.cat([x, z], dim=1)
        h = inp
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            if i == cfg.skip_layer:
                h = torch.cat([h, inp], dim=1) / math.sqrt(2)
            h = F.linear(h, lin.weight, lin.bias)
            if i < last:
                h = softplus(h, cfg.softplus_beta)
            # the sum is non-finite iff some entry is (short of 1e308 overflow)
            if not torch.isfinite(h.sum()):
                raise NonFiniteError(f"non-finite activation at layer {i}")
        return h[:, 0]

    def value_and_grad(self, x, z):
        j = self.jet(x, z, order=1)
        return j.value[:, 0], j.jac[:, :, 0]


class PartNetwork(nn.Module):
    """One hidden ReLU layer followed by a softmax over ``parts`` pieces."""

    def __init__(self, config: MlpConfig):
        super().__init__()
        self.hidden = nn.Linear(3 + config.latent_dim, config.part_hidden, dtype=DTYPE)
        self.out = nn.Linear(config.part_hidden, config.parts, dtype=DTYPE)

    def forward(self, x, z):
        h = torch.relu(self.hidden(torch.cat([x, z], dim=1)))
        return torch.softmax(self.out(h), dim=1)


class ShapeNetwork(nn.Module):
    """All network parameters: the implicit function and the part probabilities."""

    def __init__(self, config: MlpConfig):
        super().__init__()
        self.config = config
        self.f = ImplicitNetwork(config)
        self.p = PartNetwork(config)


def _torch_generator(rng: np.random.Generator) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return gen


def geometric_init(config: MlpConfig, rng=None, refit_output=True) -> ShapeNetwork:
    """Network whose zero level set starts as a sphere of the configured radius.

    Hidden layers are drawn from N(0, 2/out_dim) with zero bias; the output
    layer has weights near sqrt(pi/in_dim) and bias -r, so f(x, 0) ~ |x| - r
    in expectation over the weights. At desk widths the spread around that
    expectation is large, so by default the output layer is then refitted
    by ridge least squares to |x| - r on fixed samples of [-2.5r, 2.5r]^3.
    """
    rng = np.random.default_rng(rng)
    gen = _torch_generator(rng)
    net = ShapeNetwork(config)
    r = config.geometric_init_radius
    with torch.no_grad():
        layers = net.f.layers
        for i, lin in enumerate(layers):
            out_dim, in_dim = lin.weight.shape
            if i == len(layers) - 1:
                lin.weight.normal_(math.sqrt(math.pi) / math.sqrt(in_dim), 1e-5, generator=gen)
                lin.bias.fill_(-r)
            else:
                lin.weight.normal_(0.0, math.sqrt(2) / math.sqrt(out_dim), generator=gen)
                lin.bias.zero_()
        for lin in (net.p.hidden, net.p.out):
            bound = 1.0 / math.sqrt(lin.weight.shape[1])
            lin.weight.uniform_(-bound, bound, generator=gen)
            lin.bias.uniform_(-bound, bound, generator=gen)
    if refit_output:
        _refit_output_layer(net, rng)
    return net


def _hidden_features(fnet: ImplicitNetwork, x, z) -> torch.Tensor:
    cfg = fnet.config
    inp = torch.cat([x, z], dim=1)
    h = inp
    for i, lin in enumerate(fnet.layers[:-1]):
        if i == cfg.skip_layer:
            h = torch.cat([h, inp], dim=1) / math.sqrt(2)
        h = softplus(lin(h), cfg.softplus_beta)
    return h


def _refit_output_layer(net: ShapeNetwork, rng, n=4000, ridge=1e-5, center_weight=200.0):
    cfg = net.config
    r = cfg.geometric_init_radius
    pts = np.concatenate([rng.uniform(-2.5 * r, 2.5 * r, size=(n, 3)), np.zeros((1, 3))])
    target = np.linalg.norm(pts, axis=1) - r
    weights = np.ones(len(pts))
    weights[-1] = center_weight  # pin f(0) near -r
    with torch.no_grad():
        x = torch.as_tensor(pts, dtype=DTYPE)
        feats = _hidden_features(net.f, x, x.new_zeros(len(pts), cfg.latent_dim)).numpy()
    design = np.hstack([feats, np.ones((len(pts), 1))]) * np.sqrt(weights)[:, None]
    k = design.shape[1]
    lhs = np.vstack([design, math.sqrt(ridge * len(pts)) * np.eye(k)])
    rhs = np.concatenate([target * np.sqrt(weights), np.zeros(k)])
    sol = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    last = net.f.layers[-1]
    with torch.no_grad():
        last.weight.copy_(torch.as_tensor(sol[:-1], dtype=DTYPE)[None])
        last.bias.fill_(float(sol[-1]))


def as_tensor(a, dtype=DTYPE) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(dtype)
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)


def _batch(x, z):
    x = as_tensor(x)
    z = as_tensor(z)
    single = x.ndim == 1
    if single:
        x = x[None]
    if z.ndim == 1:
        z = z.expand(x.shape[0], -1)
    return x, z, single


def forward_f(net: ShapeNetwork, x, z):
    """f at one point (3-vector, D-vector) or a batch ((N, 3), (N, D) or (D,))."""
    x, z, single = _batch(x, z)
    out = net.f(x, z)
    return out[0] if single else out


def forward_p(net: ShapeNetwork, x, z):
    x, z, single = _batch(x, z)
    out = net.p(x, z)
    return out[0] if single else out


def derivative_bundle(net: ShapeNetwork, x, z, eta) -> DerivativeBundle:
    """Exact f, grad f, (df/dz) eta, Hessian and grad of (df/dz) eta at each point."""
    x, z, _ = _batch(x, z)
    eta = as_tensor(eta)
    if eta.ndim == 1:
        eta = eta.expand(x.shape[0], -1)
    j = net.f.jet(x, z, order=2, eta=eta)
    return DerivativeBundle(
        x=x,
        f=j.value[:, 0],
        g=j.jac[:, :, 0],
        s=j.dir[:, 0],
        H=j.hessian()[:, 0],
        m=j.dir_grad[:, :, 0],
    )


def param_gradient(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Reverse-mode gradient of a scalar loss; unused parameters get zeros."""
    if loss.numel() != 1:
        raise ValueError("gradient requested for a non-scalar loss")
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    """Adam moments for a list of parameter groups, each with its own learning rate."""

    lrs: list[float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_groups(cls, groups, lrs, **kw) -> "AdamState":
        state = cls(lrs=list(lrs), **kw)
        for g in groups:
            state.exp_avg.append([torch.zeros_like(p) for p in g])
            state.exp_avg_sq.append([torch.zeros_like(p) for p in g])
        return state


NET_LR = 0.0005
LATENT_LR = 0.001


def adam_step(state: AdamState, groups, grads) -> bool:
    """Apply one Adam update in place. Returns False (nothing changed) on non-finite grads."""
    for gg in grads:
        for g in gg:
            if not torch.isfinite(g).all():
                logger.warning("non-finite gradient; Adam step rejected")
                return False
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    with torch.no_grad():
        for gi, (params, gs) in enumerate(zip(groups, grads)):
            lr = state.lrs[gi]
            for p, g, m, v in zip(params, gs, state.exp_avg[gi], state.exp_avg_sq[gi]):
                if p.shape != g.shape or p.shape != m.shape:
                    raise ValueError("parameter, gradient and moment shapes differ")
                m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
                v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
                denom = (v / bc2).sqrt_().add_(state.eps)
                p.addcdiv_(m, denom, value=-lr / bc1)
    return True
