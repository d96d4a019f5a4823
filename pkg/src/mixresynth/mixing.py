"""Latent-code recombination operators and their samplers.

All operators are pure: every random decision comes from an explicit
``numpy.random.Generator``, so a fixed seed reproduces the same mixes and
independent generators are safe to use concurrently. Latent codes are torch
tensors shaped ``(channels, s, s)`` or ``(batch, channels, s, s)``; binary
masks select whole feature maps and broadcast over the spatial extent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError

Tensor = torch.Tensor

SIMPLEX_ATOL = 1e-6
_LOGIT_EPS = 1e-7

MIXER_MODES = ("mixup", "bern", "mixup_k", "bern_k")


def _check_same_shape(*codes: Tensor) -> None:
    shapes = {tuple(c.shape) for c in codes}
    if len(shapes) != 1:
        raise ValueError(f"latent codes must share one shape, got {sorted(shapes)}")
    if codes[0].ndim not in (3, 4):
        raise ValueError(
            f"latent codes must be (c, s, s) or (batch, c, s, s), got {tuple(codes[0].shape)}"
        )


@dataclass(frozen=True)
class MixWeights:
    """Convex-combination weights on the (k-1)-simplex.

    ``weights`` is ``(k,)`` for one draw shared by the whole batch, or
    ``(n, k)`` for per-example draws; every row is nonnegative and sums to 1.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim not in (1, 2):
            raise ValueError(f"weights must be 1-D or 2-D, got ndim={w.ndim}")
        if w.shape[-1] < 2:
            raise ValueError(f"need k >= 2 mixing weights, got k={w.shape[-1]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("weights must lie in [0, 1]")
        if np.max(np.abs(w.sum(axis=-1) - 1.0)) > SIMPLEX_ATOL:
            raise ValueError(f"weights must sum to 1 within {SIMPLEX_ATOL}")
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.weights.shape[-1]


@dataclass(frozen=True)
class FeatureMask:
    """A per-feature-map binary mask plus the probabilities it was drawn from."""

    mask: Tensor
    probs: Tensor

    def __post_init__(self):
        if tuple(self.mask.shape) != tuple(self.probs.shape):
            raise ValueError("mask and probs must share a shape")
        m = self.mask.detach()
        if not torch.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be exactly 0 or 1")
        p = self.probs.detach()
        if not torch.all((p >= 0) & (p <= 1)):
            raise ValueError("probs must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.mask.shape[-1]


def sample_convex_weight(rng: np.random.Generator, size: int | None = None):
    """Mixing coefficient alpha ~ Uniform(0, 1); scalar, or an array if ``size``."""
    if size is None:
        return float(rng.random())
    return rng.random(size)


def sample_simplex_weights(rng: np.random.Generator, k: int, size: int | None = None) -> MixWeights:
    """Weights distributed uniformly on the (k-1)-simplex, i.e. Dirichlet(1, ..., 1)."""
    if k < 2:
        raise ValueError(f"need k >= 2 to sample simplex weights, got k={k}")
    w = rng.dirichlet(np.ones(k), size=size)
    return MixWeights(w)


def sample_feature_mask(rng: np.random.Generator, probs) -> FeatureMask:
    """Independent Bernoulli(probs[i]) draw per feature map.

    ``probs`` is ``(c,)`` or ``(n, c)``; the result records both the binary
    mask and the parameters it came from.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("Bernoulli probabilities must lie in [0, 1]")
    u = rng.random(p.shape)
    mask = (u < p).astype(np.float32)
    return FeatureMask(mask=torch.from_numpy(mask), probs=torch.from_numpy(p.astype(np.float32)))


def sample_shared_probs(rng: np.random.Generator, channels: int, size: int | None = None) -> np.ndarray:
    """One Bernoulli parameter per pair, shared across all feature maps."""
    if size is None:
        return np.full(channels, rng.random())
    p = rng.random((size, 1))
    return np.broadcast_to(p, (size, channels)).copy()


def sample_partners(n: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Index permutations pairing each batch element with k-1 mix partners.

    Position 0 is the identity. Fixed points are allowed: an example may
    occasionally be paired with itself, which is well defined for every mixer.
    """
    if n < 2:
        raise ValueError(f"need a batch of at least 2 to sample mix partners, got {n}")
    if k < 2:
        raise ValueError(f"need k >= 2, got k={k}")
    return (np.arange(n),) + tuple(rng.permutation(n) for _ in range(k - 1))


def mix_convex(codes: Sequence[Tensor], weights) -> Tensor:
    """Convex combination sum_j w_j h_j of k latent codes.

    1-D weights mix whole tensors; ``(n, k)`` weights mix per example along
    the leading batch axis.
    """
    codes = list(codes)
    if len(codes) < 2:
        raise ValueError("need at least two codes to mix")
    _check_same_shape(*codes)
    if not isinstance(weights, MixWeights):
        weights = MixWeights(np.asarray(weights))
    if weights.k != len(codes):
        raise ValueError(f"got {len(codes)} codes but {weights.k} weights")
    w = weights.weights
    dtype, device = codes[0].dtype, codes[0].device
    if w.ndim == 1:
        out = codes[0] * float(w[0])
        for wj, hj in zip(w[1:], codes[1:]):
            out = out + hj * float(wj)
        return out
    if codes[0].ndim != 4 or codes[0].shape[0] != w.shape[0]:
        raise ValueError(
            f"per-example weights of shape {w.shape} need batched codes with "
            f"batch size {w.shape[0]}, got {tuple(codes[0].shape)}"
        )
    out = None
    lead = (w.shape[0],) + (1,) * (codes[0].ndim - 1)
    for j, hj in enumerate(codes):
        wj = torch.as_tensor(w[:, j], dtype=dtype, device=device).reshape(lead)
        term = hj * wj
        out = term if out is None else out + term
    return out


def mix_masked(h1: Tensor, h2: Tensor, mask) -> Tensor:
    """Feature-map crossover: map i comes from h1 where mask[i] = 1, else h2.

    The mask is broadcast over the spatial extent; it may carry gradients
    (straight-through or relaxed), in which case they flow through the
    arithmetic form m*h1 + (1-m)*h2.
    """
    _check_same_shape(h1, h2)
    m = mask.mask if isinstance(mask, FeatureMask) else mask
    if not torch.is_tensor(m):
        m = torch.as_tensor(np.asarray(m))
    c = h1.shape[-3]
    if m.shape[-1] != c:
        raise ValueError(f"mask covers {m.shape[-1]} feature maps but latent has {c}")
    if m.ndim == 2 and (h1.ndim != 4 or m.shape[0] != h1.shape[0]):
        raise ValueError("per-example masks need batched codes with matching batch size")
    if m.ndim not in (1, 2):
        raise ValueError(f"mask must be (c,) or (batch, c), got {tuple(m.shape)}")
    m = m.to(dtype=h1.dtype, device=h1.device)
    m = m.reshape(*m.shape, 1, 1)
    return m * h1 + (1.0 - m) * h2


def mix_labels(y1: Tensor, y2: Tensor, alpha) -> Tensor:
    """Convex combination of attribute vectors; alpha is scalar or per-example."""
    if tuple(y1.shape) != tuple(y2.shape):
        raise ValueError(f"attribute vectors differ in shape: {tuple(y1.shape)} vs {tuple(y2.shape)}")
    a = torch.as_tensor(alpha, dtype=y1.dtype, device=y1.device)
    if torch.any(a < 0) or torch.any(a > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if a.ndim == 1:
        a = a.reshape(-1, *([1] * (y1.ndim - 1)))
    return a * y1 + (1.0 - a) * y2


def mix_supervised(
    h1: Tensor,
    h2: Tensor,
    y_mix: Tensor,
    embedder,
    rng: np.random.Generator,
    estimator: str = "st",
    temperature: float = 0.25,
) -> tuple[Tensor, FeatureMask]:
    """Label-conditioned crossover with a learned mask distribution.

    The embedder maps the (possibly soft) attribute vector to per-feature-map
    Bernoulli parameters p, from which a hard mask is sampled. Gradients reach
    p either via a straight-through estimator (``"st"``: hard forward,
    identity backward) or via a sigmoid-relaxed mask (``"relaxed"``, which is
    smooth and therefore finite-difference checkable).
    """
    _check_same_shape(h1, h2)
    p = embedder(y_mix)
    c = h1.shape[-3]
    if p.shape[-1] != c:
        raise ConfigError(
            f"embedder emits {p.shape[-1]} Bernoulli parameters but latent has {c} feature maps"
        )
    u = torch.from_numpy(rng.random(tuple(p.shape))).to(dtype=p.dtype, device=p.device)
    hard = (u < p).to(p.dtype)
    if estimator == "st":
        m = hard + (p - p.detach())  # forward: exactly hard; backward: identity into p
    elif estimator == "relaxed":
        pc = p.clamp(_LOGIT_EPS, 1.0 - _LOGIT_EPS)
        uc = u.clamp(_LOGIT_EPS, 1.0 - _LOGIT_EPS)
        m = torch.sigmoid((torch.logit(pc) - torch.logit(uc)) / temperature)
    else:
        raise ConfigError(f"unknown mask estimator '{estimator}' (expected 'st' or 'relaxed')")
    mixed = mix_masked(h1, h2, m)
    return mixed, FeatureMask(mask=hard.detach(), probs=p.detach())


def mix_categorical(codes: Sequence[Tensor], rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Experimental k-way crossover: each feature map picks one source uniformly.

    Returns the mix and the chosen source index per feature map.
    """
    codes = list(codes)
    if len(codes) < 2:
        raise ValueError("need at least two codes to mix")
    _check_same_shape(*codes)
    k = len(codes)
    c = codes[0].shape[-3]
    shape = (c,) if codes[0].ndim == 3 else (codes[0].shape[0], c)
    choice = rng.integers(0, k, size=shape)
    out = None
    for j, hj in enumerate(codes):
        sel = torch.from_numpy((choice == j).astype(np.float32)).to(dtype=hj.dtype, device=hj.device)
        term = sel.reshape(*sel.shape, 1, 1) * hj
        out = term if out is None else out + term
    return out, torch.from_numpy(choice)


@dataclass
class LatentMixer:
    """Batch-level mixing policy: pairs batch elements and recombines codes.

    ``mode`` is one of:
      * ``"mixup"``   pairwise convex combination, alpha ~ Uniform(0, 1)
      * ``"mixup_k"`` convex combination of k codes, Dirichlet(1, ..., 1) weights
      * ``"bern"``    pairwise feature-map crossover, one shared Bernoulli
                      parameter p ~ Uniform(0, 1) per pair
      * ``"bern_k"``  experimental categorical crossover over k codes

    ``fixed_alpha`` pins the mixup coefficient; 1.0 degenerates the mixer to
    an endpoint that returns the first code unchanged.
    """

    mode: str = "mixup"
    k: int = 2
    fixed_alpha: float | None = None

    def __post_init__(self):
        if self.mode not in MIXER_MODES:
            raise ConfigError(f"unknown mixing mode '{self.mode}' (expected one of {MIXER_MODES})")
        if self.mode in ("mixup", "bern") and self.k != 2:
            raise ConfigError(f"mode '{self.mode}' is pairwise; use '{self.mode}_k' for k={self.k}")
        if self.k < 2:
            raise ConfigError(f"need k >= 2, got k={self.k}")
        if self.fixed_alpha is not None and not (0.0 <= self.fixed_alpha <= 1.0):
            raise ConfigError("fixed_alpha must lie in [0, 1]")

    def mix(self, h: Tensor, rng: np.random.Generator) -> Tensor:
        """Mix a batch of codes (n, c, s, s) with freshly sampled partners."""
        n = h.shape[0]
        if n < self.k:
            raise ValueError(f"batch of {n} is too small for k={self.k} mixing")
        partners = sample_partners(n, self.k, rng)
        codes = [h] + [h[idx] for idx in partners[1:]]
        if self.mode == "mixup":
            if self.fixed_alpha is None:
                alpha = sample_convex_weight(rng, size=n)
            else:
                alpha = np.full(n, self.fixed_alpha)
            w = MixWeights(np.stack([alpha, 1.0 - alpha], axis=-1))
            return mix_convex(codes, w)
        if self.mode == "mixup_k":
            w = sample_simplex_weights(rng, self.k, size=n)
            return mix_convex(codes, w)
        if self.mode == "bern":
            probs = sample_shared_probs(rng, channels=h.shape[-3], size=n)
            mask = sample_feature_mask(rng, probs)
            return mix_masked(codes[0], codes[1], mask)
        out, _ = mix_categorical(codes, rng)
        return out
