"""Shared fixtures and oracles.

The finite-difference helpers here are the independent gradient oracle: they
only evaluate the loss as a black box and never touch autograd.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from mixresynth.nets import (
    LabelEmbedder,
    LinearProbe,
    MLPDecoder,
    MLPDiscriminator,
    MLPEncoder,
    ModelBundle,
)


def finite_difference_grads(loss_fn, params, eps_scale: float = 1e-6):
    """Central finite differences of a black-box scalar loss w.r.t. every
    entry of every parameter tensor. ``loss_fn`` must be a pure function of
    the current parameter values."""
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            eps = eps_scale * max(1.0, abs(orig))
            flat[i] = orig + eps
            up = float(loss_fn().detach())
            flat[i] = orig - eps
            down = float(loss_fn().detach())
            flat[i] = orig
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def max_relative_error(analytic, numeric) -> float:
    """Worst relative error over all parameter entries. Entries below 1e-4 of
    the largest gradient magnitude are compared against that noise floor
    instead (a relative error is meaningless for a zero gradient)."""
    scale = max(g.abs().max().item() for g in analytic)
    scale = max(scale, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-4 * scale)
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst


def tiny_point_models(n_attributes: int = 0, critic: bool = False,
                      latent_channels: int = 3, hidden: int = 6,
                      n_classes: int | None = None, seed: int = 0) -> ModelBundle:
    """A float64 MLP bundle with smooth activations and < 1e3 parameters,
    sized for exhaustive finite-difference checks on 2-D point data."""
    torch.manual_seed(seed)
    bundle = ModelBundle(
        encoder=MLPEncoder(2, latent_channels, hidden=hidden, depth=1, act="tanh"),
        decoder=MLPDecoder(2, latent_channels, hidden=hidden, depth=1, act="tanh"),
        discriminator=MLPDiscriminator(2, hidden=hidden, depth=1,
                                       n_attributes=n_attributes, critic=critic,
                                       act="tanh"),
        probe=LinearProbe(latent_channels, n_classes) if n_classes else None,
        embedder=LabelEmbedder(n_attributes, latent_channels, hidden=4) if n_attributes else None,
    )
    bundle.to(torch.float64)
    return bundle


def count_params(modules) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
