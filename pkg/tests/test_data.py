"""Data module: normalization round trips, file parsing, ablation statistics,
the spiral generator against closed-form noise moments, and factor batches."""

import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from mixresynth.data import (
    FactorDataset,
    FactorSpec,
    SPIRAL_TURNS_RADIANS,
    ablate,
    attach_attribute_transforms,
    denormalize_images,
    dsprites_fixed_factor_batch,
    load_dataset,
    load_factor_grid,
    load_mnist_arrays,
    make_glyphs,
    make_spiral,
    make_toyfactor_grid,
    normalize_images,
    spiral_curve,
)
from mixresynth.errors import ConfigError, DataError


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def test_normalize_round_trip_float64_exact():
    x = np.arange(256, dtype=np.uint8).reshape(1, 1, 16, 16)
    v = normalize_images(x, dtype=np.float64)
    assert v.min() == -1.0 and v.max() == 1.0
    back = denormalize_images(v)
    assert np.max(np.abs(back - x)) < 1e-6


def test_normalize_round_trip_float32_quantization():
    x = np.arange(256, dtype=np.uint8).reshape(1, 1, 16, 16)
    back = denormalize_images(normalize_images(x, dtype=np.float32))
    assert np.max(np.abs(back - x)) < 1e-4


# ---------------------------------------------------------------------------
# IDX parsing and manifests
# ---------------------------------------------------------------------------

def write_idx(path: Path, array: np.ndarray) -> None:
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}i", *array.shape)
    with gzip.open(path, "wb") as f:
        f.write(header + array.astype(np.uint8).tobytes())


def make_fake_mnist(root: Path, n_train=64, n_test=16) -> Path:
    rng = np.random.default_rng(0)
    d = root / "mnist"
    d.mkdir(parents=True)
    write_idx(d / "train-images-idx3-ubyte.gz", rng.integers(0, 256, (n_train, 28, 28)))
    write_idx(d / "train-labels-idx1-ubyte.gz", rng.integers(0, 10, (n_train,)))
    write_idx(d / "t10k-images-idx3-ubyte.gz", rng.integers(0, 256, (n_test, 28, 28)))
    write_idx(d / "t10k-labels-idx1-ubyte.gz", rng.integers(0, 10, (n_test,)))
    return d


def test_idx_round_trip(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, (5, 7, 7)).astype(np.uint8)
    write_idx(tmp_path / "x.gz", arr)
    from mixresynth.data import _read_idx

    assert np.array_equal(_read_idx(tmp_path / "x.gz"), arr)


def test_idx_rejects_bad_magic(tmp_path):
    with gzip.open(tmp_path / "bad.gz", "wb") as f:
        f.write(b"\x00\x00\x0d\x01" + struct.pack(">i", 2) + b"ab")
    from mixresynth.data import _read_idx

    with pytest.raises(DataError):
        _read_idx(tmp_path / "bad.gz")


def test_missing_files_raise_descriptive_error(tmp_path):
    with pytest.raises(DataError, match="train-images"):
        load_mnist_arrays(tmp_path)


def test_manifest_checksum_mismatch(tmp_path):
    d = make_fake_mnist(tmp_path)
    (d / "manifest.json").write_text(json.dumps(
        {"train-images-idx3-ubyte.gz": "0" * 64}))
    with pytest.raises(DataError, match="checksum"):
        load_mnist_arrays(d)


def test_fake_mnist_loads_and_is_deterministic(tmp_path):
    make_fake_mnist(tmp_path)
    ds1 = load_dataset("mnist", tmp_path, val_count=16, seed=3)
    ds2 = load_dataset("mnist", tmp_path, val_count=16, seed=3)
    assert ds1.input_shape == (1, 28, 28)
    assert ds1.n_classes == 10
    assert np.array_equal(ds1.train.x, ds2.train.x)
    assert np.array_equal(ds1.val.labels, ds2.val.labels)
    assert ds1.train.x.min() >= -1.0 and ds1.train.x.max() <= 1.0
    assert len(ds1.train) == 48 and len(ds1.val) == 16
    assert ds1.test is not None and len(ds1.test) == 16


def test_val_from_test_uses_official_split(tmp_path):
    make_fake_mnist(tmp_path)
    ds = load_dataset("mnist", tmp_path, val_count=16, seed=0, val_from_test=True)
    assert len(ds.train) == 64
    assert np.array_equal(ds.val.x, ds.test.x)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def test_ablate_degenerate_and_cardinality(tmp_path):
    make_fake_mnist(tmp_path, n_train=64)
    ds = load_dataset("mnist", tmp_path, val_count=16, seed=0)
    rng = np.random.default_rng(0)
    full = ablate(ds, len(ds.train), rng)
    assert full is ds
    small = ablate(ds, 10, np.random.default_rng(1))
    assert len(small.train) == 10
    assert len(small.val) == len(ds.val)
    again = ablate(ds, 10, np.random.default_rng(1))
    assert np.array_equal(small.train.x, again.train.x)
    with pytest.raises(ValueError):
        ablate(ds, 0, rng)
    with pytest.raises(ValueError):
        ablate(ds, 10_000, rng)


def test_ablate_class_histogram_within_three_sigma():
    # Multinomial oracle: a uniform subset of size n from a labeled pool keeps
    # each class count within 3 sigma of the hypergeometric expectation.
    rng = np.random.default_rng(0)
    n_pool, n_keep, n_classes = 50_000, 10_000, 10
    labels = rng.integers(0, n_classes, n_pool)
    from mixresynth.data import Dataset, Split

    ds = Dataset(name="synth", kind="image", input_shape=(1, 1, 1),
                 train=Split(np.zeros((n_pool, 1, 1, 1), dtype=np.float32), labels),
                 val=Split(np.zeros((1, 1, 1, 1), dtype=np.float32), np.zeros(1, dtype=np.int64)))
    sub = ablate(ds, n_keep, np.random.default_rng(7))
    counts = np.bincount(sub.train.labels, minlength=n_classes)
    for c in range(n_classes):
        p = np.mean(labels == c)
        expect = n_keep * p
        sigma = np.sqrt(n_keep * p * (1 - p))
        assert abs(counts[c] - expect) <= 3 * sigma


# ---------------------------------------------------------------------------
# Spiral
# ---------------------------------------------------------------------------

def test_spiral_curve_starts_at_origin_and_stays_in_disk():
    pts = spiral_curve(512)
    assert np.allclose(pts[0], [0.0, 0.0])
    assert np.all(np.linalg.norm(pts, axis=1) <= 1.0 + 1e-6)


def test_spiral_noiseless_points_satisfy_curve_equation():
    pts = make_spiral(2000, 0.0, np.random.default_rng(5))
    r = np.linalg.norm(pts, axis=1)
    assert np.all(r <= 1.0 + 1e-6)
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    theta = r * SPIRAL_TURNS_RADIANS
    # angle of the generating parameter must match the observed angle mod 2*pi
    delta = np.angle(np.exp(1j * (theta - phi)))
    nonzero = r > 1e-9
    assert np.max(np.abs(delta[nonzero])) < 1e-5


def test_spiral_noise_matches_rayleigh_mean():
    # Independent oracle: the offset from each point to its own noise-free
    # curve point is an isotropic 2-D Gaussian, so its norm is Rayleigh with
    # mean noise_sd * sqrt(pi/2). The generator draws theta first and the
    # noise second, which this replays.
    noise_sd = 0.01
    n = 100_000
    pts = make_spiral(n, noise_sd, np.random.default_rng(11))
    replay = np.random.default_rng(11)
    theta = replay.uniform(0.0, SPIRAL_TURNS_RADIANS, size=n)
    radius = theta / SPIRAL_TURNS_RADIANS
    ideal = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    mean_dist = np.linalg.norm(pts - ideal, axis=1).mean()
    expected = noise_sd * np.sqrt(np.pi / 2.0)
    assert abs(mean_dist - expected) / expected < 0.05


def test_spiral_validation():
    with pytest.raises(ValueError):
        make_spiral(0, 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_spiral(10, -0.1, np.random.default_rng(0))


def test_spiral_dataset_assembly():
    ds = load_dataset("spiral", val_count=100, seed=2, spiral_n=400, spiral_noise_sd=0.02)
    assert ds.kind == "points"
    assert ds.train.x.shape == (400, 2)
    assert ds.val.x.shape == (100, 2)
    assert ds.train.labels is None


# ---------------------------------------------------------------------------
# Glyphs
# ---------------------------------------------------------------------------

def test_glyphs_shapes_and_attributes():
    images, labels, attrs = make_glyphs(64, np.random.default_rng(0))
    assert images.shape == (64, 1, 16, 16) and images.dtype == np.uint8
    assert set(np.unique(attrs)) <= {0.0, 1.0}
    assert labels.min() >= 0 and labels.max() <= 3
    again, _, attrs2 = make_glyphs(64, np.random.default_rng(0))
    assert np.array_equal(images, again) and np.array_equal(attrs, attrs2)


def test_glyph_attributes_change_pixels():
    rng = np.random.default_rng(1)
    images, _, attrs = make_glyphs(256, rng)
    thick = images[attrs[:, 0] == 1]
    thin = images[attrs[:, 0] == 0]
    # dilation adds stroke pixels on average (inversion flips counts, compare within polarity)
    inv_thick = attrs[attrs[:, 0] == 1][:, 1]
    inv_thin = attrs[attrs[:, 0] == 0][:, 1]
    mean_thick = (thick[inv_thick == 0] > 127).mean()
    mean_thin = (thin[inv_thin == 0] > 127).mean()
    assert mean_thick > mean_thin


def test_glyph_dataset_assembly():
    ds = load_dataset("glyphs", val_count=32, seed=0, glyph_n=128)
    assert ds.n_attributes == 2
    assert ds.train.attributes.shape == (96, 2)
    assert ds.input_shape == (1, 16, 16)


def test_attach_attribute_transforms_inverts_pixels():
    images = np.zeros((4, 1, 8, 8), dtype=np.uint8)
    images[:, 0, 4, 4] = 255
    out, attrs = attach_attribute_transforms(images, np.random.default_rng(3))
    for img, (thick, inv) in zip(out, attrs):
        if inv:
            assert img[0, 0, 0] == 255  # background flipped
        else:
            assert img[0, 0, 0] == 0


# ---------------------------------------------------------------------------
# Factor grids
# ---------------------------------------------------------------------------

def test_factor_spec_product_matches_size():
    grid = make_toyfactor_grid()
    assert grid.spec.size == len(grid) == 3 * 4 * 5 * 6 * 4 * 3
    with pytest.raises(DataError):
        FactorDataset(grid.images[:10], grid.factor_classes[:10], grid.spec)


def test_fixed_factor_batch_selection_contract():
    grid = make_toyfactor_grid()
    rng = np.random.default_rng(0)
    images, rows = grid.fixed_factor_batch(1, 32, rng, value=2)
    assert images.shape[0] == 32
    assert np.all(rows[:, 1] == 2)
    images2, rows2 = dsprites_fixed_factor_batch(grid, 1, 32, rng, value=2)
    assert np.all(rows2[:, 1] == 2)


def test_fixed_factor_batch_covers_other_factors():
    grid = make_toyfactor_grid()
    rng = np.random.default_rng(1)
    seen = [set() for _ in grid.spec.cardinalities]
    for _ in range(60):
        _, rows = grid.fixed_factor_batch(0, 64, rng)
        for j in range(grid.spec.n_factors):
            seen[j].update(np.unique(rows[:, j]).tolist())
    for j, card in enumerate(grid.spec.cardinalities):
        if j == 0:
            continue
        assert seen[j] == set(range(card))


def test_fixed_factor_batch_validation():
    grid = make_toyfactor_grid()
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        grid.fixed_factor_batch(6, 4, rng)
    with pytest.raises(ValueError):
        grid.fixed_factor_batch(0, 4, rng, value=99)


def test_factor_image_lookup_is_lexicographic():
    grid = make_toyfactor_grid()
    idx = grid._flat_index(grid.factor_classes)
    assert np.array_equal(idx, np.arange(len(grid)))


def test_load_factor_grid_names():
    assert load_factor_grid("toyfactors").spec.n_factors == 6
    with pytest.raises(ConfigError):
        load_factor_grid("spiral")


def test_unknown_dataset_name():
    with pytest.raises(ConfigError):
        load_dataset("imagenet")
