"""Loss computations for every training mode.

Modes: reconstruction-anchored adversarial auto-encoding (the ``none``
baseline), its mixed-decode variants (convex, simplex, feature-map
crossover), the label-conditioned variant, and the interpolation-critic
baseline. Each objective exposes a shared forward cache plus separate
discriminator-side and generator-side terms so the trainer can alternate
updates; all decoded samples entering discriminator terms are
gradient-detached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .mixing import (
    LatentMixer,
    mix_convex,
    mix_labels,
    mix_supervised,
    MixWeights,
    sample_convex_weight,
    sample_partners,
)
from .nets import ModelBundle

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# Elementary losses
# ---------------------------------------------------------------------------

def gan_loss_logits(logits: Tensor, target: float) -> Tensor:
    """Binary cross-entropy against a constant real/fake target, from logits."""
    t = torch.full_like(logits, float(target))
    return F.binary_cross_entropy_with_logits(logits, t)

def gan_loss(realness: Tensor, target: float) -> Tensor:
    """Binary cross-entropy from probabilities; evaluated in logit form so the
    result stays finite for realness arbitrarily close to 0 or 1."""
    if isinstance(realness, (int, float)):
        realness = torch.as_tensor(float(realness))
    return gan_loss_logits(torch.logit(realness, eps=1e-12), target)

def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over batch and elements."""
    if tuple(x.shape) != tuple(x_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return F.mse_loss(x_hat, x)

def consistency_loss(h_mix: Tensor, reencoded: Tensor) -> Tensor:
    """Mean squared error between a mixed code and its re-encoding."""
    if tuple(h_mix.shape) != tuple(reencoded.shape):
        raise ValueError(f"shape mismatch: {tuple(h_mix.shape)} vs {tuple(reencoded.shape)}")
    return F.mse_loss(reencoded, h_mix)

def cls_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-attribute binary cross-entropy; accepts soft (convex-mixed) targets."""
    if tuple(logits.shape) != tuple(targets.shape):
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets)


# ---------------------------------------------------------------------------
# Weights and reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Reconstruction weight and re-encoding consistency weight."""

    lam: float = 10.0
    beta: float = 0.0

    def __post_init__(self):
        for name in ("lam", "beta"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {val}")


@dataclass
class LossReport:
    """Named per-step scalars. Totals decompose exactly over reported parts:

        total_g = lam * recon + gan_recon + gan_mix + cls + beta * consistency
        total_d = d_real + d_recon + d_mix + d_cls

    with absent terms (None) contributing nothing. The critic baseline reuses
    the slots: gan_mix holds the fooling term, d_mix the coefficient
    regression, d_recon the real/reconstruction regularizer.
    """

    recon: float | None = None
    gan_recon: float | None = None
    gan_mix: float | None = None
    cls: float | None = None
    consistency: float | None = None
    d_real: float | None = None
    d_recon: float | None = None
    d_mix: float | None = None
    d_cls: float | None = None
    total_g: float | None = None
    total_d: float | None = None

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}

    @staticmethod
    def from_terms(g_terms: dict[str, Tensor], d_terms: dict[str, Tensor],
                   w: LossWeights) -> "LossReport":
        vals = {k: float(v.detach()) for k, v in {**g_terms, **d_terms}.items()}
        rep = LossReport(**vals)
        rep.total_g = (
            w.lam * vals.get("recon", 0.0)
            + vals.get("gan_recon", 0.0)
            + vals.get("gan_mix", 0.0)
            + vals.get("cls", 0.0)
            + w.beta * vals.get("consistency", 0.0)
        )
        rep.total_d = sum(vals.get(k, 0.0) for k in ("d_real", "d_recon", "d_mix", "d_cls"))
        return rep


@dataclass
class Batch:
    """One training batch: inputs plus optional class labels and attributes."""

    x: Tensor
    labels: Tensor | None = None
    attributes: Tensor | None = None


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

class BaselineObjective:
    """Adversarial reconstruction auto-encoding: the discriminator separates
    real inputs from reconstructions, the auto-encoder reconstructs and fools."""

    def __init__(self, weights: LossWeights):
        self.weights = weights

    # -- forward pass shared by both phases --------------------------------
    def forward_cache(self, nets: ModelBundle, batch: Batch, rng: np.random.Generator) -> dict:
        h = nets.encoder(batch.x)
        dec = nets.decoder(h)
        return {"batch": batch, "x": batch.x, "h": h, "dec": dec}

    # -- discriminator side -------------------------------------------------
    def d_terms(self, nets: ModelBundle, cache: dict) -> dict[str, Tensor]:
        d = nets.discriminator
        terms = {
            "d_real": gan_loss_logits(d(cache["x"]).logits, 1.0),
            "d_recon": gan_loss_logits(d(cache["dec"].detach()).logits, 0.0),
        }
        return terms

    def d_total(self, terms: dict[str, Tensor]) -> Tensor:
        total = None
        for v in terms.values():
            total = v if total is None else total + v
        return total

    # -- generator side ------------------------------------------------------
    def g_terms(self, nets: ModelBundle, cache: dict) -> dict[str, Tensor]:
        d = nets.discriminator
        return {
            "recon": recon_loss(cache["x"], cache["dec"]),
            "gan_recon": gan_loss_logits(d(cache["dec"]).logits, 1.0),
        }

    def g_total(self, terms: dict[str, Tensor]) -> Tensor:
        w = self.weights
        total = w.lam * terms["recon"]
        for name, v in terms.items():
            if name == "recon":
                continue
            total = total + (w.beta * v if name == "consistency" else v)
        return total

    # -- convenience ---------------------------------------------------------
    def losses(self, nets: ModelBundle, batch: Batch, rng: np.random.Generator) -> LossReport:
        """Report all terms without updating any state: this surface is a pure
        function of (batch, parameters, rng), so power-iteration state is
        frozen for the duration."""
        modes = {name: m.training for name, m in nets.components().items()}
        nets.eval()
        try:
            cache = self.forward_cache(nets, batch, rng)
            return LossReport.from_terms(self.g_terms(nets, cache),
                                         self.d_terms(nets, cache), self.weights)
        finally:
            for name, m in nets.components().items():
                m.train(modes[name])


class MixObjective(BaselineObjective):
    """Baseline terms plus decoded latent mixes that must also fool the
    discriminator (and that the discriminator must label fake). A positive
    ``beta`` adds the re-encoding consistency penalty on the mixed code."""

    def __init__(self, weights: LossWeights, mixer: LatentMixer):
        super().__init__(weights)
        self.mixer = mixer

    def forward_cache(self, nets, batch, rng):
        if batch.x.shape[0] < self.mixer.k:
            raise ValueError(
                f"batch of {batch.x.shape[0]} is too small for k={self.mixer.k} mixing")
        cache = super().forward_cache(nets, batch, rng)
        cache["h_mix"] = self.mixer.mix(cache["h"], rng)
        cache["dec_mix"] = nets.decoder(cache["h_mix"])
        return cache

    def d_terms(self, nets, cache):
        terms = super().d_terms(nets, cache)
        terms["d_mix"] = gan_loss_logits(
            nets.discriminator(cache["dec_mix"].detach()).logits, 0.0)
        return terms

    def g_terms(self, nets, cache):
        terms = super().g_terms(nets, cache)
        terms["gan_mix"] = gan_loss_logits(nets.discriminator(cache["dec_mix"]).logits, 1.0)
        if self.weights.beta > 0:
            terms["consistency"] = consistency_loss(cache["h_mix"],
                                                    nets.encoder(cache["dec_mix"]))
        return terms


class SupervisedObjective(MixObjective):
    """Unsupervised crossover terms plus the label-conditioned mixer.

    A second mixed decode is produced by the learned mask embedder from a
    convex combination of the two partners' attributes; the generator must
    fool the discriminator with it and make the discriminator's classifier
    branch read back the conditioning attributes. The extra adversarial terms
    are folded into gan_mix / d_mix; ``cls`` is the generator's consistency
    term and ``d_cls`` grounds the classifier branch on real labeled data
    (switchable via ``cls_on_real``).
    """

    def __init__(self, weights: LossWeights, estimator: str = "st",
                 temperature: float = 0.25, cls_on_real: bool = True):
        super().__init__(weights, LatentMixer(mode="bern", k=2))
        self.estimator = estimator
        self.temperature = temperature
        self.cls_on_real = cls_on_real

    def forward_cache(self, nets, batch, rng):
        if batch.attributes is None:
            raise ValueError("supervised mixing needs attribute vectors on the batch")
        if nets.embedder is None:
            raise ConfigError("supervised mixing needs a label embedder in the model bundle")
        cache = super().forward_cache(nets, batch, rng)
        h, y = cache["h"], batch.attributes
        partner = sample_partners(h.shape[0], 2, rng)[1]
        alpha = sample_convex_weight(rng, size=h.shape[0])
        y_mix = mix_labels(y, y[partner], torch.as_tensor(alpha, dtype=y.dtype))
        h_sup, mask = mix_supervised(h, h[partner], y_mix, nets.embedder, rng,
                                     estimator=self.estimator, temperature=self.temperature)
        cache.update(y_mix=y_mix, h_sup=h_sup, sup_mask=mask,
                     dec_sup=nets.decoder(h_sup))
        return cache

    def d_terms(self, nets, cache):
        terms = super().d_terms(nets, cache)
        terms["d_mix"] = terms["d_mix"] + gan_loss_logits(
            nets.discriminator(cache["dec_sup"].detach()).logits, 0.0)
        if self.cls_on_real:
            real_out = nets.discriminator(cache["x"])
            terms["d_cls"] = cls_loss(real_out.attribute_logits,
                                      cache["batch"].attributes)
        return terms

    def g_terms(self, nets, cache):
        terms = super().g_terms(nets, cache)
        sup_out = nets.discriminator(cache["dec_sup"])
        terms["gan_mix"] = terms["gan_mix"] + gan_loss_logits(sup_out.logits, 1.0)
        terms["cls"] = cls_loss(sup_out.attribute_logits, cache["y_mix"])
        return terms


class CriticObjective(BaselineObjective):
    """Interpolation-critic baseline: the critic regresses the mixing
    coefficient from decoded interpolations, the auto-encoder pushes that
    prediction to zero. ``gamma`` weighs the critic's real/reconstruction
    interpolation regularizer."""

    def __init__(self, weights: LossWeights, gamma: float = 0.2):
        super().__init__(weights)
        if not (0.0 <= gamma <= 1.0):
            raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
        self.gamma = gamma

    def forward_cache(self, nets, batch, rng):
        cache = super().forward_cache(nets, batch, rng)
        h = cache["h"]
        n = h.shape[0]
        if n < 2:
            raise ValueError(f"batch of {n} is too small for pairwise interpolation")
        partner = sample_partners(n, 2, rng)[1]
        alpha = 0.5 * rng.random(n)
        w = MixWeights(np.stack([alpha, 1.0 - alpha], axis=-1))
        cache["alpha"] = torch.as_tensor(alpha, dtype=h.dtype)
        cache["h_mix"] = mix_convex([h, h[partner]], w)
        cache["dec_mix"] = nets.decoder(cache["h_mix"])
        return cache

    def d_terms(self, nets, cache):
        d = nets.discriminator
        pred_mix = d(cache["dec_mix"].detach()).logits
        anchor = self.gamma * cache["x"] + (1.0 - self.gamma) * cache["dec"].detach()
        return {
            "d_mix": torch.mean((pred_mix - cache["alpha"]) ** 2),
            "d_recon": torch.mean(d(anchor).logits ** 2),
        }

    def g_terms(self, nets, cache):
        return {
            "recon": recon_loss(cache["x"], cache["dec"]),
            "gan_mix": torch.mean(nets.discriminator(cache["dec_mix"]).logits ** 2),
        }


# ---------------------------------------------------------------------------
# Factory and spec-level convenience surfaces
# ---------------------------------------------------------------------------

def make_objective(mode: str, weights: LossWeights, k: int = 2, estimator: str = "st",
                   temperature: float = 0.25, cls_on_real: bool = True,
                   gamma: float = 0.2, fixed_alpha: float | None = None):
    if mode == "none":
        return BaselineObjective(weights)
    if mode in ("mixup", "bern", "mixup_k", "bern_k"):
        return MixObjective(weights, LatentMixer(mode=mode, k=k, fixed_alpha=fixed_alpha))
    if mode == "sup_bern":
        return SupervisedObjective(weights, estimator=estimator, temperature=temperature,
                                   cls_on_real=cls_on_real)
    if mode == "acai":
        if weights.beta != 0:
            raise ConfigError("the critic baseline does not take a consistency term (beta must be 0)")
        return CriticObjective(weights, gamma=gamma)
    raise ConfigError(f"unknown mix mode '{mode}'")


def aegan_losses(nets: ModelBundle, batch: Batch, w: LossWeights,
                 rng: np.random.Generator | None = None) -> LossReport:
    return BaselineObjective(w).losses(nets, batch, rng or np.random.default_rng(0))

def amr_losses(nets: ModelBundle, batch: Batch, mixer: LatentMixer, w: LossWeights,
               rng: np.random.Generator) -> LossReport:
    return MixObjective(w, mixer).losses(nets, batch, rng)

def supervised_losses(nets: ModelBundle, batch: Batch, w: LossWeights,
                      rng: np.random.Generator, estimator: str = "st",
                      cls_on_real: bool = True) -> LossReport:
    return SupervisedObjective(w, estimator=estimator, cls_on_real=cls_on_real).losses(
        nets, batch, rng)

def acai_losses(nets: ModelBundle, batch: Batch, w: LossWeights,
                rng: np.random.Generator, gamma: float = 0.2) -> LossReport:
    return CriticObjective(w, gamma=gamma).losses(nets, batch, rng)
