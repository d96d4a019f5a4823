"""Alternating-update optimisation loop, checkpointing, and metrics logging.

Each step runs one discriminator update on gradient-detached generator
outputs, then one generator-path update (encoder, decoder, and the label
embedder when configured), then one probe-only update. A single numpy
generator owned by the train state drives every random decision, so a fixed
seed reproduces runs exactly; torch randomness is only used for weight
initialisation.
"""

from __future__ import annotations

import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from . import evaluation
from .config import ExperimentConfig
from .errors import ConfigError, DataError, NumericsError
from .mixing import sample_partners  # re-exported: partner sampling lives with the mixers
from .nets import ModelBundle, build_models
from .objectives import Batch, LossReport, LossWeights, make_objective

__all__ = [
    "OptimizerConfig", "TrainState", "sample_partners", "train_step",
    "run_experiment", "save_checkpoint", "load_checkpoint", "seed_everything",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings shared by all component optimizers."""

    lr: float = 1e-4
    b1: float = 0.5
    b2: float = 0.99
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not (self.lr > 0):
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.b1 < 1 and 0 <= self.b2 < 1):
            raise ConfigError(f"momentum coefficients must lie in [0, 1), got {self.b1}, {self.b2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {self.weight_decay}")

    def build(self, params, lr: float | None = None) -> torch.optim.Adam:
        return torch.optim.Adam(params, lr=self.lr if lr is None else lr,
                                betas=(self.b1, self.b2), weight_decay=self.weight_decay)


@dataclass
class TrainState:
    """Mutable optimisation state owned by exactly one training thread."""

    models: ModelBundle
    optimizers: dict[str, torch.optim.Adam]
    rng: np.random.Generator
    objective: object
    epoch: int = 0
    step: int = 0
    best_val_acc: float | None = None


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch (weight init) and build the run's numpy generator."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def _check_finite(total: torch.Tensor, terms: dict[str, torch.Tensor], step: int) -> None:
    if torch.isfinite(total):
        return
    for name, v in terms.items():
        if not torch.isfinite(v):
            raise NumericsError(f"non-finite loss term '{name}' at step {step}")
    raise NumericsError(f"non-finite loss total at step {step}")


def discriminator_phase(state: TrainState, cache: dict) -> dict[str, torch.Tensor]:
    """One discriminator update on gradient-detached generator outputs."""
    obj = state.objective
    d_terms = obj.d_terms(state.models, cache)
    d_total = obj.d_total(d_terms)
    _check_finite(d_total, d_terms, state.step)
    opt = state.optimizers["discriminator"]
    opt.zero_grad(set_to_none=True)
    d_total.backward()
    opt.step()
    return d_terms


def generator_phase(state: TrainState, cache: dict) -> dict[str, torch.Tensor]:
    """One update of the generator path (encoder, decoder, embedder)."""
    obj = state.objective
    g_terms = obj.g_terms(state.models, cache)
    g_total = obj.g_total(g_terms)
    _check_finite(g_total, g_terms, state.step)
    opt = state.optimizers["generator"]
    opt.zero_grad(set_to_none=True)
    g_total.backward()
    opt.step()
    return g_terms


def probe_phase(state: TrainState, batch: Batch, cache: dict) -> float | None:
    """One probe-only update over detached codes."""
    if state.models.probe is None or batch.labels is None:
        return None
    logits = state.models.probe(cache["h"])
    probe_loss = F.cross_entropy(logits, batch.labels)
    if not torch.isfinite(probe_loss):
        raise NumericsError(f"non-finite loss term 'probe' at step {state.step}")
    opt = state.optimizers["probe"]
    opt.zero_grad(set_to_none=True)
    probe_loss.backward()
    opt.step()
    return float(probe_loss.detach())


def train_step(state: TrainState, batch: Batch, config: ExperimentConfig | None = None) -> LossReport:
    """One alternating update: discriminator, generator path, then probe."""
    cache = state.objective.forward_cache(state.models, batch, state.rng)
    d_terms = discriminator_phase(state, cache)
    g_terms = generator_phase(state, cache)
    probe_phase(state, batch, cache)
    state.step += 1
    return LossReport.from_terms(g_terms, d_terms, state.objective.weights)


def iterate_batches(split: data_mod.Split, batch_size: int,
                    rng: np.random.Generator) -> Iterator[Batch]:
    """Seed-determined shuffled batches; a tail smaller than 2 is dropped
    because pairwise mixing needs at least two examples."""
    n = len(split)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        yield Batch(
            x=torch.from_numpy(split.x[idx]),
            labels=None if split.labels is None else torch.from_numpy(split.labels[idx]),
            attributes=None if split.attributes is None else torch.from_numpy(split.attributes[idx]),
        )


def build_state(config: ExperimentConfig, dataset: data_mod.Dataset) -> TrainState:
    rng = seed_everything(config.seed)
    supervised = config.mix_mode == "sup_bern"
    if supervised and dataset.n_attributes == 0:
        raise ConfigError(f"dataset '{dataset.name}' has no attribute vectors for supervised mixing")
    models = build_models(
        input_shape=dataset.input_shape,
        kind=dataset.kind,
        d_h=config.d_h,
        base_width=config.width,
        n_classes=dataset.n_classes,
        n_attributes=dataset.n_attributes if supervised else 0,
        critic=config.mix_mode == "acai",
        sn_iters=config.sn_iters,
        gen_act=config.gen_act,
        disc_act=config.disc_act,
    )
    opt_cfg = OptimizerConfig(config.lr, config.b1, config.b2, config.weight_decay)
    optimizers = {
        "generator": opt_cfg.build(list(models.generator_parameters())),
        "discriminator": opt_cfg.build(models.discriminator.parameters()),
    }
    if models.probe is not None:
        optimizers["probe"] = opt_cfg.build(models.probe.parameters(), lr=config.probe_lr)
    objective = make_objective(
        config.mix_mode,
        LossWeights(config.lam, config.beta),
        k=config.k,
        estimator=config.mask_estimator,
        temperature=config.mask_temperature,
        cls_on_real=config.cls_on_real,
        gamma=config.acai_gamma,
    )
    return TrainState(models=models, optimizers=optimizers, rng=rng, objective=objective)


def _epoch_record(epoch: int, reports: list[dict], probe_train: float | None,
                  probe_val: float | None) -> dict:
    keys = sorted({k for r in reports for k in r})
    rec: dict = {"epoch": epoch}
    for k in keys:
        vals = [r[k] for r in reports if k in r]
        rec[k] = float(np.mean(vals)) if vals else None
    rec["probe_train_acc"] = probe_train
    rec["probe_val_acc"] = probe_val
    return rec


def _probe_accs(state: TrainState, dataset: data_mod.Dataset) -> tuple[float | None, float | None]:
    if state.models.probe is None or dataset.train.labels is None:
        return None, None
    state.models.eval()
    try:
        train_acc = evaluation.probe_accuracy(state.models.probe, state.models.encoder,
                                              dataset.train.x, dataset.train.labels)
        val_acc = evaluation.probe_accuracy(state.models.probe, state.models.encoder,
                                            dataset.val.x, dataset.val.labels)
    finally:
        state.models.train()
    return train_acc, val_acc


def run_experiment(config: ExperimentConfig,
                   dataset: data_mod.Dataset | None = None) -> tuple[TrainState, list[dict]]:
    """Train per the config; log one metrics record per epoch; keep latest and
    best-by-validation-probe checkpoints."""
    out_dir = Path(config.output_root)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_for_config(config)
    state = build_state(config, dataset)
    if config.resume:
        load_checkpoint(Path(config.resume), config, state)
    state.models.train()

    metrics_path = out_dir / "metrics.jsonl"
    timings_path = out_dir / "timings.jsonl"
    if state.epoch == 0:
        metrics_path.write_text("")
        timings_path.write_text("")
        save_checkpoint(out_dir / "latest.ckpt", state, config)

    metrics: list[dict] = []
    for epoch in range(state.epoch, config.epochs):
        t0 = time.monotonic()
        reports = [train_step(state, batch, config).to_dict()
                   for batch in iterate_batches(dataset.train, config.batch_size, state.rng)]
        probe_train, probe_val = _probe_accs(state, dataset)
        state.epoch = epoch + 1
        if probe_val is not None:
            state.best_val_acc = probe_val if state.best_val_acc is None else max(
                state.best_val_acc, probe_val)
        rec = _epoch_record(epoch, reports, probe_train, probe_val)
        metrics.append(rec)
        with metrics_path.open("a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        with timings_path.open("a") as f:
            f.write(json.dumps({"epoch": epoch, "wall_seconds": time.monotonic() - t0}) + "\n")
        save_checkpoint(out_dir / "latest.ckpt", state, config)
        if probe_val is not None and probe_val >= state.best_val_acc:
            save_checkpoint(out_dir / "best.ckpt", state, config)
    return state, metrics


def load_for_config(config: ExperimentConfig) -> data_mod.Dataset:
    dataset = data_mod.load_dataset(
        config.dataset,
        root=config.data_root,
        val_count=config.val_count,
        seed=config.seed,
        spiral_n=config.spiral_n,
        spiral_noise_sd=config.spiral_noise_sd,
        glyph_n=config.glyph_n,
        val_from_test=config.val_from_test,
    )
    if config.n_keep is not None:
        dataset = data_mod.ablate(dataset, config.n_keep,
                                  np.random.default_rng([config.seed, 0xAB1A7E]))
    return dataset


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _canonical(obj):
    """Normalize a payload so equal content always serializes to equal bytes:
    dict keys sorted, strings interned (pickle memo references depend on
    object identity, which differs between fresh and loaded state dicts)."""
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: (kv[0].__class__.__name__, repr(kv[0])))
        return {(sys.intern(k) if isinstance(k, str) else k): _canonical(v) for k, v in items}
    if isinstance(obj, (list, tuple)):
        vals = [_canonical(v) for v in obj]
        return tuple(vals) if isinstance(obj, tuple) else vals
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def save_checkpoint(path: Path, state: TrainState, config: ExperimentConfig) -> None:
    payload = {
        "format_version": 1,
        "config": config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "best_val_acc": state.best_val_acc,
        "models": {name: m.state_dict() for name, m in state.models.components().items()},
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "rng_numpy": state.rng.bit_generator.state,
        "rng_torch": torch.get_rng_state(),
    }
    # Serialize through a buffer: torch.save embeds the destination file name
    # inside the archive, which would break byte-identical re-saves.
    buf = io.BytesIO()
    torch.save(_canonical(payload), buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path, config: ExperimentConfig, state: TrainState) -> TrainState:
    """Restore parameters, optimizer state, counters and generator state.
    Any mismatch between the stored config's identity fields and the current
    one is a hard error."""
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    payload = torch.load(path, weights_only=False)
    saved = payload["config"]
    current = config.to_dict()
    mismatched = [k for k in config.identity_keys()
                  if saved.get(k) != current.get(k)]
    if mismatched:
        raise ConfigError(
            f"checkpoint {path} was produced under a different config; mismatched keys: {mismatched}")
    components = state.models.components()
    if set(payload["models"]) != set(components):
        raise ConfigError(
            f"checkpoint components {sorted(payload['models'])} do not match model {sorted(components)}")
    for name, m in components.items():
        try:
            m.load_state_dict(payload["models"][name])
        except RuntimeError as exc:
            raise ConfigError(f"architecture mismatch while loading '{name}': {exc}") from exc
    for name, opt in state.optimizers.items():
        opt.load_state_dict(payload["optimizers"][name])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.best_val_acc = payload["best_val_acc"]
    state.rng.bit_generator.state = payload["rng_numpy"]
    torch.set_rng_state(payload["rng_torch"])
    return state
