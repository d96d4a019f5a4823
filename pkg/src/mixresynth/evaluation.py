"""Evaluation protocols and figure emission.

Probe accuracy over frozen codes, the fixed-factor majority-vote
disentanglement score, decoded interpolation grids (convex and feature-map
sweeps), nearest-neighbour manifold coverage for 2-D point data, and the
independently trained reference attribute classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import data as data_mod
from .mixing import mix_convex, mix_masked
from .nets import SmallConvClassifier

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

def probe_accuracy(probe, encoder, images: np.ndarray, labels: np.ndarray,
                   batch_size: int = 512) -> float:
    """Fraction of correct argmax predictions of the probe over encoder codes."""
    if len(images) == 0:
        raise ValueError("cannot evaluate a probe on an empty split")
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start:start + batch_size])
            pred = probe(encoder(x)).argmax(dim=1).numpy()
            correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / len(images)


# ---------------------------------------------------------------------------
# Disentanglement metric
# ---------------------------------------------------------------------------

@dataclass
class DisentanglementResult:
    """Vote table (latent dim x factor), the fitted majority map (-1 where a
    dimension received no training votes), and held-out vote accuracy."""

    votes: np.ndarray
    majority: np.ndarray
    accuracy: float


def disentanglement_score(encode, dataset, n_votes: int = 800, vote_batch: int = 64,
                          rng: np.random.Generator | None = None,
                          train_fraction: float = 0.8, n_std_samples: int = 10000,
                          collapse_eps: float = 1e-8) -> DisentanglementResult:
    """Majority-vote factor recovery over fixed-factor batches.

    Per-dimension standard deviations are estimated over a large random
    sample; each vote fixes one ground-truth factor, encodes a batch with the
    other factors free, and records the dimension whose std-normalized
    variance is smallest together with the fixed factor's index. A majority
    map from dimension to factor is fitted on the first ``train_fraction`` of
    votes and scored on the rest. Dimensions whose global std falls below
    ``collapse_eps`` are treated as collapsed and excluded from the argmin.
    """
    rng = rng or np.random.default_rng(0)
    spec = dataset.spec
    sample, _ = dataset.sample_batch(min(n_std_samples, len(dataset)), rng)
    codes = np.asarray(encode(sample), dtype=np.float64)
    global_std = codes.std(axis=0)
    active = global_std >= collapse_eps
    if not active.any():
        raise ValueError("every latent dimension is collapsed (zero variance)")

    records = []
    for _ in range(n_votes):
        factor = int(rng.integers(spec.n_factors))
        batch, _ = dataset.fixed_factor_batch(factor, vote_batch, rng)
        z = np.asarray(encode(batch), dtype=np.float64)
        var = (z / global_std).var(axis=0)
        var[~active] = np.inf
        records.append((int(np.argmin(var)), factor))

    n_train = int(round(train_fraction * n_votes))
    dims = codes.shape[1]
    votes = np.zeros((dims, spec.n_factors), dtype=np.int64)
    for dim, factor in records[:n_train]:
        votes[dim, factor] += 1
    majority = np.where(votes.sum(axis=1) > 0, votes.argmax(axis=1), -1)
    held_out = records[n_train:]
    if not held_out:
        raise ValueError("train_fraction leaves no held-out votes")
    accuracy = float(np.mean([majority[dim] == factor for dim, factor in held_out]))
    return DisentanglementResult(votes=votes, majority=majority, accuracy=accuracy)


# ---------------------------------------------------------------------------
# Interpolation grids
# ---------------------------------------------------------------------------

def interpolation_grid(encoder, decoder, x1: Tensor, x2: Tensor, steps: int,
                       mode: str = "mixup", rng: np.random.Generator | None = None,
                       path: str | Path | None = None) -> np.ndarray:
    """One row of decoded mixes between two inputs.

    Convex mode sweeps the weight on the second code over {0, ..., 1}; the
    feature-map mode sweeps the expected mask fraction using one fixed uniform
    draw per row so masks grow by inclusion and the row stays coherent.
    Endpoints are exactly the two decoded reconstructions. Returns the uint8
    grid and writes a lossless PNG when ``path`` is given.
    """
    if steps < 2:
        raise ValueError(f"need steps >= 2, got {steps}")
    if x1.ndim != 4 or x2.ndim != 4 or x1.shape[0] != 1 or x2.shape[0] != 1:
        raise ValueError("x1 and x2 must be single-image batches of shape (1, c, h, w)")
    with torch.no_grad():
        h1, h2 = encoder(x1), encoder(x2)
        ts = np.linspace(0.0, 1.0, steps)
        if mode == "mixup":
            codes = [mix_convex([h1, h2], np.array([1.0 - t, t])) for t in ts]
        elif mode == "bern":
            rng = rng or np.random.default_rng(0)
            u = rng.random(h1.shape[1])
            masks = [torch.from_numpy((u < t).astype(np.float32)) for t in ts]
            codes = [mix_masked(h2, h1, m) for m in masks]  # t=0: all maps from h1
        else:
            raise ValueError(f"unknown grid mode '{mode}'")
        tiles = [decoder(h) for h in codes]
    row = torch.cat(tiles, dim=3).squeeze(0).numpy()
    grid = np.round(data_mod.denormalize_images(row)).astype(np.uint8)
    grid = np.moveaxis(grid, 0, -1)
    if grid.shape[-1] == 1:
        grid = grid[..., 0]
    if path is not None:
        Image.fromarray(grid).save(Path(path), format="PNG")
    return grid


# ---------------------------------------------------------------------------
# Manifold coverage for 2-D data
# ---------------------------------------------------------------------------

def spiral_coverage(points: np.ndarray, reference: np.ndarray, epsilon: float,
                    chunk: int = 1024) -> float:
    """Fraction of points whose exact nearest-neighbour distance to the
    reference set is at most ``epsilon`` (brute force)."""
    points = np.asarray(points, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.size == 0:
        raise ValueError("reference set must not be empty")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    hits = 0
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        d2 = ((p[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        hits += int((np.sqrt(d2) <= epsilon).sum())
    return hits / len(points)


def decode_random_mixes(encoder, decoder, points: np.ndarray, n_mixes: int,
                        rng: np.random.Generator, batch: int = 512) -> np.ndarray:
    """Decoded convex mixes of random pairs, the overlay material for the
    manifold-coverage experiment."""
    out = []
    with torch.no_grad():
        for start in range(0, n_mixes, batch):
            n = min(batch, n_mixes - start)
            i = rng.integers(0, len(points), size=n)
            j = rng.integers(0, len(points), size=n)
            alpha = rng.random(n)
            h1 = encoder(torch.from_numpy(points[i]))
            h2 = encoder(torch.from_numpy(points[j]))
            w = np.stack([alpha, 1.0 - alpha], axis=-1)
            out.append(decoder(mix_convex([h1, h2], w)).numpy())
    return np.concatenate(out, axis=0)


def save_spiral_overlay(real_points: np.ndarray, mixed_points: np.ndarray,
                        path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(real_points[:, 0], real_points[:, 1], s=4, c="tab:blue", label="data")
    ax.scatter(mixed_points[:, 0], mixed_points[:, 1], s=4, c="tab:orange", label="decoded mixes")
    ax.set_aspect("equal")
    ax.legend(loc="upper right")
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Reference attribute classifier
# ---------------------------------------------------------------------------

def train_reference_classifier(images: np.ndarray, attributes: np.ndarray,
                               epochs: int = 5, batch_size: int = 128,
                               lr: float = 1e-3, seed: int = 0) -> SmallConvClassifier:
    """Train an independent conv classifier predicting binary attributes.
    Used only as a measurement instrument; never shares parameters with the
    generative model."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    clf = SmallConvClassifier(tuple(images.shape[1:]), attributes.shape[1])
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = clf(torch.from_numpy(images[idx]))
            loss = F.binary_cross_entropy_with_logits(logits, torch.from_numpy(attributes[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return clf


def attribute_accuracy(clf, images: np.ndarray, attributes: np.ndarray,
                       batch_size: int = 256) -> tuple[float, float]:
    """(joint, per-attribute-mean) accuracy of thresholded predictions."""
    joint = 0
    per_attr = 0.0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start:start + batch_size])
            pred = (torch.sigmoid(clf(x)) > 0.5).numpy().astype(np.float32)
            target = attributes[start:start + batch_size]
            joint += int((pred == target).all(axis=1).sum())
            per_attr += float((pred == target).mean(axis=1).sum())
    return joint / len(images), per_attr / len(images)


def write_result_record(out_dir: Path, metric: str, value, config_digest: str,
                        seed: int) -> None:
    record = {"metric": metric, "value": value, "config_digest": config_digest, "seed": seed}
    with (Path(out_dir) / "results.jsonl").open("a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
