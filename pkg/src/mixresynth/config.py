"""Experiment configuration: a flat, typed key = value format.

Config files are diff-friendly flat text (``key = value``, ``#`` comments);
every field is also exposed as a ``--kebab-case`` CLI flag, and flag
overrides beat file values. Unknown keys are hard errors. ``lambda`` is the
external name of the reconstruction weight (stored as ``lam``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

MIX_MODES = ("none", "mixup", "bern", "mixup_k", "bern_k", "sup_bern", "acai")
DATASETS = ("mnist", "kmnist", "svhn", "mnist_attrs", "glyphs", "dsprites",
            "toyfactors", "spiral")
BOTTLENECK_SIZES = (32, 256, 1024)
LAMBDA_SWEEP = (2.0, 5.0, 10.0, 20.0, 50.0)  # shipped preset for the recon-weight sweep
DSPRITES_LAMBDA = 1.0  # preset that worked best for the sprite-grid runs

# Reference epoch presets from the original full-scale runs; deliberately not
# defaults, desk-scale runs use far fewer.
REFERENCE_EPOCHS = {"mnist": 2000, "kmnist": 2000, "svhn": 3500, "svhn_ablation": 4000}

ENV_DATA_ROOT = "MIXRESYNTH_DATA"

_EXTERNAL_NAMES = {"lam": "lambda"}
_INTERNAL_NAMES = {v: k for k, v in _EXTERNAL_NAMES.items()}

# Fields that identify a run for checkpoint-compatibility purposes (resuming
# under a different value of any of these is a hard error).
_IDENTITY_EXCLUDE = {"output_root", "resume", "epochs", "eval_probe", "eval_disentanglement",
                     "eval_grids", "eval_spiral", "grid_steps", "disent_votes",
                     "disent_batch", "n_mix_points", "data_root"}


@dataclass
class ExperimentConfig:
    """Full description of one run."""

    dataset: str
    mix_mode: str = "mixup"
    k: int = 2
    lam: float = 10.0
    beta: float = 0.0
    d_h: int = 32
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    n_keep: int | None = None
    val_count: int = 1000
    val_from_test: bool = False
    # optimizer
    lr: float = 1e-4
    b1: float = 0.5
    b2: float = 0.99
    weight_decay: float = 1e-5
    probe_lr: float | None = None
    # architecture
    width: int = 32
    sn_iters: int = 1
    gen_act: str = "lrelu"
    disc_act: str = "lrelu"
    # mode knobs
    mask_estimator: str = "st"
    mask_temperature: float = 0.25
    cls_on_real: bool = True
    acai_gamma: float = 0.2
    # data knobs
    spiral_n: int = 4096
    spiral_noise_sd: float = 0.01
    glyph_n: int = 8000
    data_root: str = ""
    # orchestration
    output_root: str = ""
    resume: str | None = None
    eval_probe: bool = True
    eval_disentanglement: bool = False
    eval_grids: bool = False
    eval_spiral: bool = False
    grid_steps: int = 8
    disent_votes: int = 800
    disent_batch: int = 64
    n_mix_points: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(key: str, msg: str):
            raise ConfigError(f"invalid value for '{_EXTERNAL_NAMES.get(key, key)}': {msg}")

        if not self.dataset:
            raise ConfigError("missing required key 'dataset'")
        if self.dataset not in DATASETS:
            fail("dataset", f"'{self.dataset}' is not one of {DATASETS}")
        if self.mix_mode not in MIX_MODES:
            fail("mix_mode", f"'{self.mix_mode}' is not one of {MIX_MODES}")
        if self.mix_mode in ("mixup_k", "bern_k"):
            if self.k < 2:
                fail("k", f"k-way mixing needs k >= 2, got {self.k}")
        elif self.mix_mode in ("mixup", "bern", "sup_bern") and self.k != 2:
            fail("k", f"mode '{self.mix_mode}' is pairwise (k=2), got k={self.k}")
        if self.lam < 0:
            fail("lam", f"must be nonnegative, got {self.lam}")
        if self.beta < 0:
            fail("beta", f"must be nonnegative, got {self.beta}")
        if self.mix_mode == "acai" and self.beta != 0:
            fail("beta", "the critic baseline takes no consistency term")
        if self.d_h not in BOTTLENECK_SIZES:
            fail("d_h", f"must be one of {BOTTLENECK_SIZES}, got {self.d_h}")
        if self.epochs < 0:
            fail("epochs", f"must be nonnegative, got {self.epochs}")
        if self.batch_size < 2:
            fail("batch_size", f"must be at least 2, got {self.batch_size}")
        if self.n_keep is not None and self.n_keep <= 0:
            fail("n_keep", f"must be positive, got {self.n_keep}")
        if self.val_count <= 0:
            fail("val_count", f"must be positive, got {self.val_count}")
        if not (self.lr > 0):
            fail("lr", f"must be positive, got {self.lr}")
        if not (0 <= self.b1 < 1 and 0 <= self.b2 < 1):
            fail("b1", f"momentum coefficients must lie in [0, 1), got {self.b1}, {self.b2}")
        if self.weight_decay < 0:
            fail("weight_decay", f"must be nonnegative, got {self.weight_decay}")
        if self.probe_lr is not None and not (self.probe_lr > 0):
            fail("probe_lr", f"must be positive, got {self.probe_lr}")
        if self.width < 1:
            fail("width", f"must be positive, got {self.width}")
        if self.sn_iters < 1:
            fail("sn_iters", f"must be at least 1, got {self.sn_iters}")
        if self.mask_estimator not in ("st", "relaxed"):
            fail("mask_estimator", f"must be 'st' or 'relaxed', got '{self.mask_estimator}'")
        if not (self.mask_temperature > 0):
            fail("mask_temperature", f"must be positive, got {self.mask_temperature}")
        if not (0 <= self.acai_gamma <= 1):
            fail("acai_gamma", f"must lie in [0, 1], got {self.acai_gamma}")
        if self.spiral_n < 1:
            fail("spiral_n", f"must be positive, got {self.spiral_n}")
        if self.spiral_noise_sd < 0:
            fail("spiral_noise_sd", f"must be nonnegative, got {self.spiral_noise_sd}")
        if self.grid_steps < 2:
            fail("grid_steps", f"must be at least 2, got {self.grid_steps}")
        if self.mix_mode == "sup_bern" and self.dataset not in ("glyphs", "mnist_attrs"):
            fail("mix_mode", f"dataset '{self.dataset}' carries no attribute vectors")
        if not self.data_root:
            self.data_root = os.environ.get(ENV_DATA_ROOT, "data")
        if not self.output_root:
            self.output_root = f"runs/{self.dataset}_{self.mix_mode}_seed{self.seed}"

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            out[_EXTERNAL_NAMES.get(f.name, f.name)] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        kwargs = {}
        for key, val in values.items():
            name = _INTERNAL_NAMES.get(key, key)
            if name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config key '{key}'")
            kwargs[name] = val
        if "dataset" not in kwargs:
            raise ConfigError("missing required key 'dataset'")
        return cls(**kwargs)

    def identity_keys(self) -> list[str]:
        return [_EXTERNAL_NAMES.get(f.name, f.name) for f in dataclasses.fields(self)
                if f.name not in _IDENTITY_EXCLUDE]


def _parse_scalar(key: str, raw: str, target_type, optional: bool):
    raw = raw.strip()
    if optional and raw.lower() in ("none", "null", ""):
        return None
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for '{key}': {exc}") from exc


_FIELD_TYPES: dict[str, tuple[type, bool]] = {}
for _f in dataclasses.fields(ExperimentConfig):
    _t = _f.type
    _optional = "None" in str(_t)
    for base, py in (("int", int), ("float", float), ("bool", bool), ("str", str)):
        if str(_t).startswith(base):
            _FIELD_TYPES[_f.name] = (py, _optional)
            break
    else:
        _FIELD_TYPES[_f.name] = (str, _optional)


def read_config_file(path: str | Path) -> dict:
    """Parse a flat key = value file into typed raw values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line.strip()}'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        name = _INTERNAL_NAMES.get(key, key)
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}' ({path}:{lineno})")
        ftype, optional = _FIELD_TYPES[name]
        values[key] = _parse_scalar(key, raw, ftype, optional)
    return values


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve a config from an optional file plus overrides (flags win)."""
    values = read_config_file(path) if path is not None else {}
    for key, val in (overrides or {}).items():
        name = _INTERNAL_NAMES.get(key, key)
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = val
    return ExperimentConfig.from_dict(values)


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    lines = []
    for key, val in cfg.to_dict().items():
        if val is None:
            val = "none"
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    Path(path).write_text("\n".join(lines) + "\n")


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
