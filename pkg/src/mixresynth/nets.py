"""Parametric components: encoder, decoder, discriminator, probe, embedder.

Two architecture families share one latent layout of ``(c, s, s)`` feature
maps: strided convolutions for image data (s = 4) and MLPs for 2-D point
data (s = 1). Every discriminator weight is spectrally normalized each
forward pass via power iteration with persistent vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

Tensor = torch.Tensor

LATENT_SPATIAL = 4  # image bottleneck is (c, 4, 4)

_ACTIVATIONS = {
    "lrelu": lambda: nn.LeakyReLU(0.2),
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "elu": nn.ELU,
    "softplus": nn.Softplus,
}


def _make_act(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ConfigError(f"unknown activation '{name}' (expected one of {sorted(_ACTIVATIONS)})")


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------

@dataclass
class PowerIterState:
    """Persistent left/right power-iteration vectors for one weight."""

    u: Tensor
    v: Tensor


def spectral_normalize(
    weight: Tensor,
    state: PowerIterState,
    n_iters: int = 1,
    eps: float = 1e-12,
    update: bool = True,
) -> Tensor:
    """Rescale ``weight`` by the power-iteration estimate of its top singular value.

    ``state`` persists between calls so one iteration per forward pass tracks
    the singular vector as the weight drifts. With ``update=False`` the stored
    vectors are used without mutation, keeping the result a pure (and
    differentiable) function of the weight. A zero weight comes back
    unchanged: the estimate is clamped away from zero.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    w = weight.reshape(weight.shape[0], -1)
    if update:
        with torch.no_grad():
            u, v = state.u, state.v
            for _ in range(n_iters):
                v = F.normalize(w.t() @ u, dim=0, eps=eps)
                u = F.normalize(w @ v, dim=0, eps=eps)
            state.u.copy_(u)
            state.v.copy_(v)
    # Clones keep the autograd graph valid when the buffers are updated in
    # place by a later forward pass before this one is backpropagated.
    u, v = state.u.clone(), state.v.clone()
    sigma = torch.dot(u, w @ v)
    return weight / sigma.clamp(min=eps)


class SpectralNorm(nn.Module):
    """Wraps a Linear or Conv2d module and normalizes its weight each forward."""

    def __init__(self, module: nn.Module, n_iters: int = 1):
        super().__init__()
        if not isinstance(module, (nn.Linear, nn.Conv2d)):
            raise ConfigError(f"spectral norm supports Linear/Conv2d, got {type(module).__name__}")
        self.module = module
        self.n_iters = n_iters
        rows = module.weight.shape[0]
        cols = module.weight.reshape(rows, -1).shape[1]
        self.register_buffer("u", F.normalize(torch.randn(rows), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(cols), dim=0))

    @property
    def state(self) -> PowerIterState:
        return PowerIterState(self.u, self.v)

    def normalized_weight(self, n_iters: int | None = None, update: bool | None = None) -> Tensor:
        return spectral_normalize(
            self.module.weight,
            self.state,
            n_iters=self.n_iters if n_iters is None else n_iters,
            update=self.training if update is None else update,
        )

    def forward(self, x: Tensor) -> Tensor:
        w = self.normalized_weight()
        m = self.module
        if isinstance(m, nn.Conv2d):
            return F.conv2d(x, w, m.bias, m.stride, m.padding)
        return F.linear(x, w, m.bias)


def spectral_norm_modules(root: nn.Module) -> Iterator[SpectralNorm]:
    for mod in root.modules():
        if isinstance(mod, SpectralNorm):
            yield mod


# ---------------------------------------------------------------------------
# Convolutional family (images)
# ---------------------------------------------------------------------------

def _plan_downsampling(size: int, target: int = LATENT_SPATIAL) -> list[int]:
    """Spatial sizes along the stride-2 chain, ending exactly at ``target``."""
    sizes = [size]
    while sizes[-1] > target:
        sizes.append((sizes[-1] + 1) // 2)  # k3/s2/p1 convolution maps n -> ceil(n/2)
    if sizes[-1] != target or len(sizes) < 2:
        raise ConfigError(f"cannot reach a {target}x{target} bottleneck from input size {size}")
    return sizes


def _widths(base: int, depth: int) -> list[int]:
    return [base * min(2 ** i, 4) for i in range(depth)]


class ConvEncoder(nn.Module):
    """Strided-conv encoder from (in_ch, n, n) images to a (c, 4, 4) bottleneck."""

    def __init__(self, in_shape: tuple[int, int, int], latent_channels: int,
                 base_width: int = 32, act: str = "lrelu"):
        super().__init__()
        in_ch, h, w = in_shape
        if h != w:
            raise ConfigError(f"encoder expects square images, got {in_shape}")
        sizes = _plan_downsampling(h)
        widths = _widths(base_width, len(sizes) - 1)
        layers: list[nn.Module] = []
        prev = in_ch
        for wd in widths:
            layers += [nn.Conv2d(prev, wd, 3, stride=2, padding=1), _make_act(act)]
            prev = wd
        layers.append(nn.Conv2d(prev, latent_channels, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        self.in_shape = tuple(in_shape)
        self.latent_shape = (latent_channels, LATENT_SPATIAL, LATENT_SPATIAL)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"expected input (n, {self.in_shape}), got {tuple(x.shape)}")
        return self.net(x)


class ConvDecoder(nn.Module):
    """Transpose-conv mirror of the encoder; tanh squashes into pixel range."""

    def __init__(self, out_shape: tuple[int, int, int], latent_channels: int,
                 base_width: int = 32, act: str = "relu", squash: bool = True):
        super().__init__()
        out_ch, h, w = out_shape
        if h != w:
            raise ConfigError(f"decoder expects square images, got {out_shape}")
        sizes = _plan_downsampling(h)
        widths = _widths(base_width, len(sizes) - 1)
        layers: list[nn.Module] = [nn.Conv2d(latent_channels, widths[-1], 3, 1, 1), _make_act(act)]
        prev = widths[-1]
        # Walk the size chain backwards; output_padding recovers the exact size.
        for i in range(len(sizes) - 1, 0, -1):
            n_in, n_out = sizes[i], sizes[i - 1]
            out_pad = n_out - (2 * n_in - 1)
            wd = widths[i - 2] if i >= 2 else widths[0]
            layers += [nn.ConvTranspose2d(prev, wd, 3, stride=2, padding=1, output_padding=out_pad),
                       _make_act(act)]
            prev = wd
        layers.append(nn.Conv2d(prev, out_ch, 3, 1, 1))
        if squash:
            layers.append(nn.Tanh())
        self.net = nn.Sequential(*layers)
        self.out_shape = tuple(out_shape)
        self.latent_shape = (latent_channels, LATENT_SPATIAL, LATENT_SPATIAL)

    def forward(self, h: Tensor) -> Tensor:
        if h.ndim != 4 or tuple(h.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected latent (n, {self.latent_shape}), got {tuple(h.shape)}")
        return self.net(h)


@dataclass
class DiscriminatorOutput:
    """Head outputs per input: raw logits, sigmoid realness (GAN mode only),
    and attribute logits when a classifier branch is configured."""

    logits: Tensor
    realness: Tensor | None = None
    attribute_logits: Tensor | None = None


class ConvDiscriminator(nn.Module):
    """Spectrally-normalized conv trunk with a realness (or critic) head.

    ``critic=True`` turns the head into unsquashed scalar regression used by
    the interpolation-critic baseline. ``n_attributes > 0`` adds an affine
    classifier branch sharing the trunk features.
    """

    def __init__(self, in_shape: tuple[int, int, int], base_width: int = 32,
                 n_attributes: int = 0, critic: bool = False, sn_iters: int = 1,
                 act: str = "lrelu"):
        super().__init__()
        in_ch, h, w = in_shape
        sizes = _plan_downsampling(h)
        widths = _widths(base_width, len(sizes) - 1)
        layers: list[nn.Module] = []
        prev = in_ch
        for wd in widths:
            layers += [SpectralNorm(nn.Conv2d(prev, wd, 3, 2, 1), sn_iters), _make_act(act)]
            prev = wd
        self.trunk = nn.Sequential(*layers)
        flat = prev * LATENT_SPATIAL * LATENT_SPATIAL
        self.head = SpectralNorm(nn.Linear(flat, 1), sn_iters)
        self.attr_head = SpectralNorm(nn.Linear(flat, n_attributes), sn_iters) if n_attributes else None
        self.critic = critic
        self.in_shape = tuple(in_shape)

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"expected input (n, {self.in_shape}), got {tuple(x.shape)}")
        feat = self.trunk(x).flatten(1)
        logits = self.head(feat).squeeze(-1)
        return DiscriminatorOutput(
            logits=logits,
            realness=None if self.critic else torch.sigmoid(logits),
            attribute_logits=self.attr_head(feat) if self.attr_head is not None else None,
        )


# ---------------------------------------------------------------------------
# MLP family (2-D point data)
# ---------------------------------------------------------------------------

class MLPEncoder(nn.Module):
    """MLP encoder from (n, in_dim) points to a (c, 1, 1) latent."""

    def __init__(self, in_dim: int, latent_channels: int, hidden: int = 64,
                 depth: int = 2, act: str = "lrelu"):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for _ in range(depth):
            layers += [nn.Linear(prev, hidden), _make_act(act)]
            prev = hidden
        layers.append(nn.Linear(prev, latent_channels))
        self.net = nn.Sequential(*layers)
        self.in_shape = (in_dim,)
        self.latent_shape = (latent_channels, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_shape[0]:
            raise ValueError(f"expected input (n, {self.in_shape[0]}), got {tuple(x.shape)}")
        return self.net(x).reshape(x.shape[0], *self.latent_shape)


class MLPDecoder(nn.Module):
    """MLP decoder back to point space. Point data is unbounded, so the
    output head is linear (no squashing)."""

    def __init__(self, out_dim: int, latent_channels: int, hidden: int = 64,
                 depth: int = 2, act: str = "lrelu"):
        super().__init__()
        layers: list[nn.Module] = []
        prev = latent_channels
        for _ in range(depth):
            layers += [nn.Linear(prev, hidden), _make_act(act)]
            prev = hidden
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)
        self.out_shape = (out_dim,)
        self.latent_shape = (latent_channels, 1, 1)

    def forward(self, h: Tensor) -> Tensor:
        if h.ndim != 4 or tuple(h.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected latent (n, {self.latent_shape}), got {tuple(h.shape)}")
        return self.net(h.flatten(1))


class MLPDiscriminator(nn.Module):
    """Spectrally-normalized MLP discriminator/critic over point data."""

    def __init__(self, in_dim: int, hidden: int = 64, depth: int = 2,
                 n_attributes: int = 0, critic: bool = False, sn_iters: int = 1,
                 act: str = "lrelu"):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for _ in range(depth):
            layers += [SpectralNorm(nn.Linear(prev, hidden), sn_iters), _make_act(act)]
            prev = hidden
        self.trunk = nn.Sequential(*layers)
        self.head = SpectralNorm(nn.Linear(prev, 1), sn_iters)
        self.attr_head = SpectralNorm(nn.Linear(prev, n_attributes), sn_iters) if n_attributes else None
        self.critic = critic
        self.in_shape = (in_dim,)

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        if x.ndim != 2 or x.shape[1] != self.in_shape[0]:
            raise ValueError(f"expected input (n, {self.in_shape[0]}), got {tuple(x.shape)}")
        feat = self.trunk(x)
        logits = self.head(feat).squeeze(-1)
        return DiscriminatorOutput(
            logits=logits,
            realness=None if self.critic else torch.sigmoid(logits),
            attribute_logits=self.attr_head(feat) if self.attr_head is not None else None,
        )


# ---------------------------------------------------------------------------
# Probe, embedder, reference classifier
# ---------------------------------------------------------------------------

class LinearProbe(nn.Module):
    """Exactly one affine map over detached, flattened codes.

    The detach lives inside ``forward`` so probe training can never leak
    gradients into the encoder, regardless of the caller.
    """

    def __init__(self, d_h: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(d_h, n_classes)

    def forward(self, h: Tensor) -> Tensor:
        z = h.detach().flatten(1)
        if z.shape[1] != self.linear.in_features:
            raise ValueError(f"probe expects {self.linear.in_features} features, got {z.shape[1]}")
        return self.linear(z)


class LabelEmbedder(nn.Module):
    """MLP from attribute vectors to per-feature-map Bernoulli parameters in [0, 1]."""

    def __init__(self, n_attributes: int, latent_channels: int, hidden: int = 64,
                 act: str = "lrelu"):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_attributes, hidden),
            _make_act(act),
            nn.Linear(hidden, latent_channels),
            nn.Sigmoid(),
        )
        self.n_attributes = n_attributes

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[-1] != self.n_attributes:
            raise ValueError(f"expected {self.n_attributes} attributes, got {y.shape[-1]}")
        return self.net(y)


class SmallConvClassifier(nn.Module):
    """Compact conv net used as an independent reference attribute classifier."""

    def __init__(self, in_shape: tuple[int, int, int], n_outputs: int, width: int = 32):
        super().__init__()
        in_ch, h, w = in_shape
        sizes = _plan_downsampling(h)
        layers: list[nn.Module] = []
        prev = in_ch
        for i in range(len(sizes) - 1):
            layers += [nn.Conv2d(prev, width * min(2 ** i, 4), 3, 2, 1), nn.ReLU()]
            prev = width * min(2 ** i, 4)
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(prev * LATENT_SPATIAL * LATENT_SPATIAL, n_outputs)
        self.in_shape = tuple(in_shape)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.trunk(x).flatten(1))


# ---------------------------------------------------------------------------
# Bundle + builder
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """All parametric components of one experiment."""

    encoder: nn.Module
    decoder: nn.Module
    discriminator: nn.Module
    probe: nn.Module | None = None
    embedder: nn.Module | None = None

    def components(self) -> dict[str, nn.Module]:
        out = {"encoder": self.encoder, "decoder": self.decoder,
               "discriminator": self.discriminator}
        if self.probe is not None:
            out["probe"] = self.probe
        if self.embedder is not None:
            out["embedder"] = self.embedder
        return out

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()
        if self.embedder is not None:
            yield from self.embedder.parameters()

    def train(self, mode: bool = True) -> "ModelBundle":
        for m in self.components().values():
            m.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    def to(self, *args, **kwargs) -> "ModelBundle":
        for m in self.components().values():
            m.to(*args, **kwargs)
        return self


def latent_channels_for(d_h: int, kind: str) -> int:
    """Channel count for the requested bottleneck dimensionality."""
    if kind == "points":
        return d_h
    per_map = LATENT_SPATIAL * LATENT_SPATIAL
    if d_h % per_map != 0:
        raise ConfigError(f"d_h={d_h} is not a multiple of {per_map} (the 4x4 map size)")
    return d_h // per_map


def build_models(
    input_shape: tuple[int, ...],
    kind: str,
    d_h: int,
    base_width: int = 32,
    n_classes: int | None = None,
    n_attributes: int = 0,
    critic: bool = False,
    sn_iters: int = 1,
    gen_act: str = "lrelu",
    disc_act: str = "lrelu",
) -> ModelBundle:
    """Assemble the component set for a dataset shape and bottleneck size."""
    c = latent_channels_for(d_h, kind)
    if kind == "image":
        encoder = ConvEncoder(input_shape, c, base_width, act=gen_act)
        decoder = ConvDecoder(input_shape, c, base_width, act=gen_act)
        disc = ConvDiscriminator(input_shape, base_width, n_attributes=n_attributes,
                                 critic=critic, sn_iters=sn_iters, act=disc_act)
    elif kind == "points":
        in_dim = input_shape[0]
        encoder = MLPEncoder(in_dim, c, hidden=base_width, act=gen_act)
        decoder = MLPDecoder(in_dim, c, hidden=base_width, act=gen_act)
        disc = MLPDiscriminator(in_dim, hidden=base_width, n_attributes=n_attributes,
                                critic=critic, sn_iters=sn_iters, act=disc_act)
    else:
        raise ConfigError(f"unknown data kind '{kind}'")
    probe = LinearProbe(d_h, n_classes) if n_classes else None
    embedder = LabelEmbedder(n_attributes, c) if n_attributes else None
    return ModelBundle(encoder, decoder, disc, probe, embedder)
