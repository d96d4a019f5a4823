"""Experiment orchestration: subcommands train, eval, grid, sweep, fetch-data.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.
Every config field is exposed as a --kebab-case flag; flags beat file values.
No network access happens during dispatch; only fetch-data downloads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as config_mod
from . import data as data_mod
from . import evaluation
from . import trainer as trainer_mod
from .config import ExperimentConfig, config_digest, parse_config, write_config
from .errors import ConfigError, DataError, NumericsError
from .objectives import Batch

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(ExperimentConfig):
        external = config_mod._EXTERNAL_NAMES.get(f.name, f.name)
        flag = "--" + external.replace("_", "-")
        ftype, optional = config_mod._FIELD_TYPES[f.name]
        if ftype is bool:
            parser.add_argument(flag, default=argparse.SUPPRESS, metavar="BOOL",
                                type=lambda s, k=external: config_mod._parse_scalar(k, s, bool, False))
        else:
            parser.add_argument(
                flag, default=argparse.SUPPRESS, metavar=external.upper(),
                type=lambda s, k=external, t=ftype, o=optional: config_mod._parse_scalar(k, s, t, o))


def _collect_overrides(args: argparse.Namespace) -> dict:
    skip = {"command", "config", "checkpoint", "n_seeds", "datasets", "index1",
            "index2", "steps", "out", "mode", "root"}
    return {k.replace("-", "_") if False else k: v
            for k, v in vars(args).items() if k not in skip}


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    return parse_config(getattr(args, "config", None), _collect_overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixresynth",
                                     description="Adversarial resynthesis of mixed auto-encoder codes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("--config", type=Path, help="flat key = value config file")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="run evaluation protocols from a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    _add_config_flags(p_eval)

    p_grid = sub.add_parser("grid", help="emit one interpolation grid from a checkpoint")
    p_grid.add_argument("--checkpoint", type=Path, required=True)
    p_grid.add_argument("--index1", type=int, default=0, help="validation index of the left input")
    p_grid.add_argument("--index2", type=int, default=1, help="validation index of the right input")
    p_grid.add_argument("--steps", type=int, default=8)
    p_grid.add_argument("--mode", choices=("mixup", "bern"), default="mixup")
    p_grid.add_argument("--out", type=Path, default=None)

    p_sweep = sub.add_parser("sweep", help="repeat one experiment over consecutive seeds")
    p_sweep.add_argument("--config", type=Path)
    p_sweep.add_argument("--n-seeds", type=int, default=3, dest="n_seeds")
    _add_config_flags(p_sweep)

    p_fetch = sub.add_parser("fetch-data", help="download dataset files (network required)")
    p_fetch.add_argument("--root", type=Path, default=Path("data"))
    p_fetch.add_argument("--datasets", nargs="+", default=["mnist"],
                         choices=sorted(data_mod.DATASET_URLS))
    return parser


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def dispatch(cfg: ExperimentConfig) -> int:
    """Train and evaluate per the config; write metrics, checkpoints, figures
    and a manifest into the run directory."""
    t0 = time.monotonic()
    out_dir = Path(cfg.output_root)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir / "config.txt")

    dataset = trainer_mod.load_for_config(cfg)
    state, metrics = trainer_mod.run_experiment(cfg, dataset)
    state.models.eval()
    digest = config_digest(cfg)

    if cfg.eval_probe and state.best_val_acc is not None:
        evaluation.write_result_record(out_dir, "probe_best_val_acc",
                                       state.best_val_acc, digest, cfg.seed)
    if cfg.eval_disentanglement:
        grid = data_mod.load_factor_grid(cfg.dataset, cfg.data_root)
        encoder = state.models.encoder

        def encode(batch: np.ndarray) -> np.ndarray:
            with torch.no_grad():
                return encoder(torch.from_numpy(batch.astype(np.float32))).flatten(1).numpy()

        result = evaluation.disentanglement_score(
            encode, grid, n_votes=cfg.disent_votes, vote_batch=cfg.disent_batch,
            rng=np.random.default_rng([cfg.seed, 0xD15E]))
        evaluation.write_result_record(out_dir, "disentanglement_acc",
                                       result.accuracy, digest, cfg.seed)
    if cfg.eval_grids:
        if dataset.kind != "image":
            raise ConfigError("interpolation grids need an image dataset")
        x1 = torch.from_numpy(dataset.val.x[:1])
        x2 = torch.from_numpy(dataset.val.x[1:2])
        for mode in ("mixup", "bern"):
            evaluation.interpolation_grid(
                state.models.encoder, state.models.decoder, x1, x2,
                steps=cfg.grid_steps, mode=mode,
                rng=np.random.default_rng([cfg.seed, 0x9D1D]),
                path=out_dir / f"grid_{mode}.png")
    if cfg.eval_spiral:
        if dataset.kind != "points":
            raise ConfigError("manifold coverage is defined for 2-D point datasets")
        rng = np.random.default_rng([cfg.seed, 0x5B1A])
        mixes = evaluation.decode_random_mixes(
            state.models.encoder, state.models.decoder, dataset.val.x,
            cfg.n_mix_points, rng)
        coverage = evaluation.spiral_coverage(
            mixes, data_mod.spiral_curve(), epsilon=3 * cfg.spiral_noise_sd)
        evaluation.write_result_record(out_dir, "spiral_coverage", coverage, digest, cfg.seed)
        evaluation.save_spiral_overlay(dataset.val.x, mixes, out_dir / "spiral_overlay.png")

    manifest = {
        "config_digest": digest,
        "seed": cfg.seed,
        "version": __version__,
        "wall_seconds": time.monotonic() - t0,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    payload = torch.load(args.checkpoint, weights_only=False)
    cfg = ExperimentConfig.from_dict({**payload["config"], **_collect_overrides(args),
                                      "epochs": 0, "resume": str(args.checkpoint)})
    return dispatch(cfg)


def _cmd_grid(args: argparse.Namespace) -> int:
    payload = torch.load(args.checkpoint, weights_only=False)
    cfg = ExperimentConfig.from_dict({**payload["config"], "resume": str(args.checkpoint)})
    dataset = trainer_mod.load_for_config(cfg)
    state = trainer_mod.build_state(cfg, dataset)
    trainer_mod.load_checkpoint(args.checkpoint, cfg, state)
    state.models.eval()
    for name, idx in (("index1", args.index1), ("index2", args.index2)):
        if not (0 <= idx < len(dataset.val)):
            raise ConfigError(f"{name}={idx} outside the validation split of {len(dataset.val)}")
    out = args.out or Path(cfg.output_root) / f"grid_{args.mode}_{args.index1}_{args.index2}.png"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    evaluation.interpolation_grid(
        state.models.encoder, state.models.decoder,
        torch.from_numpy(dataset.val.x[args.index1:args.index1 + 1]),
        torch.from_numpy(dataset.val.x[args.index2:args.index2 + 1]),
        steps=args.steps, mode=args.mode,
        rng=np.random.default_rng([cfg.seed, 0x9D1D]), path=out)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    base = _resolve_config(args)
    if args.n_seeds < 1:
        raise ConfigError(f"need at least one seed, got {args.n_seeds}")
    root = Path(base.output_root)
    best_accs = []
    for i in range(args.n_seeds):
        seed = base.seed + i
        cfg = dataclasses.replace(base, seed=seed, output_root=str(root / f"seed{seed}"))
        dispatch(cfg)
        results = (root / f"seed{seed}" / "results.jsonl").read_text().splitlines()
        acc = next((json.loads(line)["value"] for line in results
                    if json.loads(line)["metric"] == "probe_best_val_acc"), None)
        best_accs.append(acc)
    summary = {
        "seeds": [base.seed + i for i in range(args.n_seeds)],
        "best_val_accs": best_accs,
    }
    if all(a is not None for a in best_accs):
        summary["mean"] = float(np.mean(best_accs))
        summary["std"] = float(np.std(best_accs))
        print(f"probe best-val accuracy over {args.n_seeds} seeds: "
              f"{summary['mean']:.4f} +/- {summary['std']:.4f}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return dispatch(_resolve_config(args))
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "grid":
            return _cmd_grid(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "fetch-data":
            data_mod.fetch(args.root, args.datasets)
            return EXIT_OK
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
