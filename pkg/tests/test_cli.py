"""CLI and config: parsing precedence, round trips, dispatch artifacts,
deterministic reruns, sweep summaries, and exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from mixresynth.cli import EXIT_DATA, EXIT_USAGE, dispatch, main
from mixresynth.config import (
    ExperimentConfig,
    LAMBDA_SWEEP,
    REFERENCE_EPOCHS,
    config_digest,
    parse_config,
    read_config_file,
    write_config,
)
from mixresynth.errors import ConfigError


def spiral_args(tmp_path, name="run", epochs="1"):
    return ["train", "--dataset", "spiral", "--epochs", epochs, "--batch-size", "64",
            "--spiral-n", "256", "--val-count", "64", "--width", "16",
            "--seed", "3", "--output-root", str(tmp_path / name)]


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def test_missing_dataset_names_offending_key():
    with pytest.raises(ConfigError, match="dataset"):
        parse_config(None, {"epochs": 3})


def test_unknown_key_is_hard_error(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("dataset = spiral\nbogus_key = 1\n")
    with pytest.raises(ConfigError, match="bogus_key"):
        parse_config(f)


def test_invalid_enum_names_offending_key():
    with pytest.raises(ConfigError, match="mix_mode"):
        parse_config(None, {"dataset": "spiral", "mix_mode": "blend"})
    with pytest.raises(ConfigError, match="d_h"):
        parse_config(None, {"dataset": "spiral", "d_h": 33})
    with pytest.raises(ConfigError, match="'k'"):
        parse_config(None, {"dataset": "spiral", "mix_mode": "mixup_k", "k": 1})


def test_flag_override_beats_file_value(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("dataset = spiral\nlambda = 5.0\nepochs = 7\n")
    cfg = parse_config(f, {"lambda": 20.0})
    assert cfg.lam == 20.0
    assert cfg.epochs == 7


def test_config_file_comments_and_booleans(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# experiment\ndataset = spiral  # inline note\neval_grids = true\nn_keep = none\n")
    cfg = parse_config(f)
    assert cfg.eval_grids is True
    assert cfg.n_keep is None


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(dataset="glyphs", mix_mode="sup_bern", lam=2.5, beta=0.0,
                           epochs=4, seed=9, output_root=str(tmp_path / "x"))
    path = tmp_path / "resolved.cfg"
    write_config(cfg, path)
    reparsed = parse_config(path)
    assert reparsed == cfg
    assert config_digest(reparsed) == config_digest(cfg)


def test_lambda_presets_shipped():
    assert LAMBDA_SWEEP == (2.0, 5.0, 10.0, 20.0, 50.0)
    assert REFERENCE_EPOCHS["svhn"] == 3500


def test_acai_rejects_consistency_weight():
    with pytest.raises(ConfigError, match="beta"):
        ExperimentConfig(dataset="spiral", mix_mode="acai", beta=1.0)


def test_paper_default_optimizer_settings():
    cfg = ExperimentConfig(dataset="spiral")
    assert (cfg.lr, cfg.b1, cfg.b2, cfg.weight_decay) == (1e-4, 0.5, 0.99, 1e-5)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def test_dispatch_epochs_zero_emits_manifest_and_checkpoint(tmp_path):
    cfg = ExperimentConfig(dataset="spiral", epochs=0, spiral_n=128, val_count=32,
                           width=8, eval_probe=False, output_root=str(tmp_path / "r"))
    assert dispatch(cfg) == 0
    out = tmp_path / "r"
    assert (out / "latest.ckpt").exists()
    assert (out / "manifest.json").exists()
    assert (out / "config.txt").exists()
    assert (out / "metrics.jsonl").read_text() == ""
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_digest"] == config_digest(cfg)
    assert parse_config(out / "config.txt") == cfg


def test_dispatch_twice_is_byte_identical(tmp_path):
    rc1 = main(spiral_args(tmp_path, "a", epochs="2"))
    rc2 = main(spiral_args(tmp_path, "b", epochs="2"))
    assert rc1 == rc2 == 0
    m1 = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    m2 = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert m1 == m2 and len(m1) > 0


def test_dispatch_spiral_eval_writes_coverage(tmp_path):
    cfg = ExperimentConfig(dataset="spiral", epochs=1, spiral_n=256, val_count=64,
                           width=16, eval_spiral=True, n_mix_points=64,
                           output_root=str(tmp_path / "r"))
    assert dispatch(cfg) == 0
    lines = [json.loads(l) for l in (tmp_path / "r" / "results.jsonl").read_text().splitlines()]
    metrics = {rec["metric"] for rec in lines}
    assert "spiral_coverage" in metrics
    assert (tmp_path / "r" / "spiral_overlay.png").exists()


def test_dispatch_grids_and_disentanglement_toggles(tmp_path):
    cfg = ExperimentConfig(dataset="toyfactors", epochs=1, val_count=320,
                           batch_size=128, width=8, eval_grids=True,
                           eval_disentanglement=True, disent_votes=60,
                           disent_batch=16, grid_steps=4,
                           output_root=str(tmp_path / "r"))
    assert dispatch(cfg) == 0
    out = tmp_path / "r"
    assert (out / "grid_mixup.png").exists()
    assert (out / "grid_bern.png").exists()
    recs = [json.loads(l) for l in (out / "results.jsonl").read_text().splitlines()]
    assert any(r["metric"] == "disentanglement_acc" for r in recs)


# ---------------------------------------------------------------------------
# Exit codes and subcommands
# ---------------------------------------------------------------------------

def test_usage_error_exit_code(tmp_path):
    rc = main(["train", "--dataset", "spiral", "--mix-mode", "nope",
               "--output-root", str(tmp_path / "x")])
    assert rc == EXIT_USAGE


def test_data_error_exit_code(tmp_path):
    rc = main(["train", "--dataset", "mnist", "--data-root", str(tmp_path / "empty"),
               "--output-root", str(tmp_path / "x")])
    assert rc == EXIT_DATA


def test_grid_subcommand_from_checkpoint(tmp_path):
    cfg = ExperimentConfig(dataset="glyphs", epochs=1, glyph_n=96, val_count=32,
                           batch_size=32, width=8, output_root=str(tmp_path / "r"))
    assert dispatch(cfg) == 0
    out_png = tmp_path / "g.png"
    rc = main(["grid", "--checkpoint", str(tmp_path / "r" / "latest.ckpt"),
               "--index1", "0", "--index2", "1", "--steps", "4",
               "--out", str(out_png)])
    assert rc == 0
    assert out_png.exists()


def test_eval_subcommand_reruns_evals_only(tmp_path):
    cfg = ExperimentConfig(dataset="spiral", epochs=1, spiral_n=256, val_count=64,
                           width=16, output_root=str(tmp_path / "r"))
    assert dispatch(cfg) == 0
    rc = main(["eval", "--checkpoint", str(tmp_path / "r" / "latest.ckpt"),
               "--eval-spiral", "true", "--n-mix-points", "32",
               "--output-root", str(tmp_path / "e")])
    assert rc == 0
    recs = [json.loads(l) for l in (tmp_path / "e" / "results.jsonl").read_text().splitlines()]
    assert any(r["metric"] == "spiral_coverage" for r in recs)


def test_sweep_emits_mean_std_summary(tmp_path):
    rc = main(["sweep", "--n-seeds", "2", "--dataset", "glyphs", "--epochs", "1",
               "--glyph-n", "96", "--val-count", "32", "--batch-size", "32",
               "--width", "8", "--seed", "5", "--output-root", str(tmp_path / "sw")])
    assert rc == 0
    summary = json.loads((tmp_path / "sw" / "summary.json").read_text())
    assert summary["seeds"] == [5, 6]
    accs = summary["best_val_accs"]
    assert len(accs) == 2
    assert abs(summary["mean"] - np.mean(accs)) < 1e-12
    assert abs(summary["std"] - np.std(accs)) < 1e-12
    for seed in (5, 6):
        assert (tmp_path / "sw" / f"seed{seed}" / "metrics.jsonl").exists()
