"""Dataset ingestion and synthesis.

File-backed datasets (handwritten digits, the cursive-character variant,
street-view digits, the sprite grid) load from a documented directory layout
and never touch the network; ``fetch(...)`` downloads them out of band.
Procedural datasets (the 2-D spiral, the two-attribute glyph set, the small
factor grid) are generated from a seeded generator and therefore always
available.

Images are normalized to [-1, 1]; 2-D point data passes through unchanged.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SPIRAL_TURNS_RADIANS = 6.0 * np.pi  # three full turns
GLYPH_FAMILIES = ("ring", "cross", "bars", "wedge")
TOYFACTOR_CARDINALITIES = (3, 4, 5, 6, 4, 3)

DATASET_URLS = {
    "mnist": {
        "train-images-idx3-ubyte.gz": "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
        "train-labels-idx1-ubyte.gz": "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
        "t10k-images-idx3-ubyte.gz": "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
        "t10k-labels-idx1-ubyte.gz": "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
    },
    "kmnist": {
        "train-images-idx3-ubyte.gz": "http://codh.rois.ac.jp/kmnist/dataset/kmnist/train-images-idx3-ubyte.gz",
        "train-labels-idx1-ubyte.gz": "http://codh.rois.ac.jp/kmnist/dataset/kmnist/train-labels-idx1-ubyte.gz",
        "t10k-images-idx3-ubyte.gz": "http://codh.rois.ac.jp/kmnist/dataset/kmnist/t10k-images-idx3-ubyte.gz",
        "t10k-labels-idx1-ubyte.gz": "http://codh.rois.ac.jp/kmnist/dataset/kmnist/t10k-labels-idx1-ubyte.gz",
    },
    "svhn": {
        "train_32x32.mat": "http://ufldl.stanford.edu/housenumbers/train_32x32.mat",
        "test_32x32.mat": "http://ufldl.stanford.edu/housenumbers/test_32x32.mat",
    },
    "dsprites": {
        "dsprites.npz": "https://github.com/google-deepmind/dsprites-dataset/raw/master/dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz",
    },
}


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_images(pixels, dtype=np.float32) -> np.ndarray:
    """Map [0, 255] pixel values to [-1, 1]; arithmetic runs in float64."""
    x = np.asarray(pixels).astype(np.float64)
    return (x / 127.5 - 1.0).astype(dtype)

def denormalize_images(values) -> np.ndarray:
    """Map [-1, 1] back to [0, 255] (float64, clipped)."""
    v = np.asarray(values).astype(np.float64)
    return np.clip((v + 1.0) * 127.5, 0.0, 255.0)


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass
class Split:
    """One dataset split. ``x`` is (n, c, h, w) float32 images in [-1, 1] or
    (n, 2) float32 points; labels/attributes/factors align 1:1 when present."""

    x: np.ndarray
    labels: np.ndarray | None = None
    attributes: np.ndarray | None = None
    factors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx: np.ndarray) -> "Split":
        return Split(
            x=self.x[idx],
            labels=None if self.labels is None else self.labels[idx],
            attributes=None if self.attributes is None else self.attributes[idx],
            factors=None if self.factors is None else self.factors[idx],
        )


@dataclass
class FactorSpec:
    """Cardinalities of the ground-truth generative factors."""

    cardinalities: tuple[int, ...]

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if any(c < 1 for c in self.cardinalities):
            raise ValueError("factor cardinalities must be positive")

    @property
    def n_factors(self) -> int:
        return len(self.cardinalities)

    @property
    def size(self) -> int:
        return int(np.prod(self.cardinalities))


@dataclass
class Dataset:
    name: str
    kind: str  # "image" | "points"
    input_shape: tuple[int, ...]
    train: Split
    val: Split
    test: Split | None = None
    n_classes: int | None = None
    n_attributes: int = 0
    factor_spec: FactorSpec | None = None


class FactorDataset:
    """A complete factor grid in lexicographic factor order, for the
    fixed-factor disentanglement protocol. Images stay uint8 internally and
    are normalized per batch."""

    def __init__(self, images: np.ndarray, factor_classes: np.ndarray, spec: FactorSpec):
        if spec.size != len(images):
            raise DataError(
                f"factor grid size {spec.size} does not match {len(images)} records")
        if len(factor_classes) != len(images):
            raise DataError("factor annotations must align 1:1 with images")
        self.images = images
        self.factor_classes = np.asarray(factor_classes, dtype=np.int64)
        self.spec = spec
        self._strides = np.cumprod((1,) + spec.cardinalities[:0:-1])[::-1].copy()

    def __len__(self) -> int:
        return len(self.images)

    def _flat_index(self, classes: np.ndarray) -> np.ndarray:
        return classes @ self._strides

    def sample_batch(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=n)
        return normalize_images(self.images[idx]), self.factor_classes[idx]

    def fixed_factor_batch(self, factor_index: int, batch_size: int,
                           rng: np.random.Generator, value: int | None = None):
        """Batch in which one factor is held at a single value while all other
        factors are sampled uniformly. Returns (images, factor rows)."""
        cards = self.spec.cardinalities
        if not (0 <= factor_index < len(cards)):
            raise ValueError(f"factor index {factor_index} out of range [0, {len(cards)})")
        if value is None:
            value = int(rng.integers(cards[factor_index]))
        elif not (0 <= value < cards[factor_index]):
            raise ValueError(f"value {value} out of range for factor {factor_index}")
        classes = np.stack([rng.integers(c, size=batch_size) for c in cards], axis=1)
        classes[:, factor_index] = value
        idx = self._flat_index(classes)
        return normalize_images(self.images[idx]), classes


def dsprites_fixed_factor_batch(dataset: FactorDataset, factor_index: int,
                                batch_size: int, rng: np.random.Generator,
                                value: int | None = None):
    """Module-level alias for :meth:`FactorDataset.fixed_factor_batch`."""
    return dataset.fixed_factor_batch(factor_index, batch_size, rng, value=value)


# ---------------------------------------------------------------------------
# File-backed loaders
# ---------------------------------------------------------------------------

def _read_idx(path: Path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped): magic, big-endian dims, payload."""
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4:
        raise DataError(f"{path} is truncated")
    zeros, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zeros != 0 or dtype_code != 0x08:
        raise DataError(f"{path} is not an unsigned-byte IDX file")
    dims = struct.unpack(f">{ndim}i", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload size {data.size} does not match header {dims}")
    return data.reshape(dims)


def _verify_manifest(root: Path) -> None:
    manifest = root / "manifest.json"
    if not manifest.exists():
        return
    try:
        entries = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {manifest}: {exc}") from exc
    for name, digest in entries.items():
        path = root / name
        if not path.exists():
            raise DataError(f"{path} listed in manifest but missing")
        actual = hashlib.sha256(path.read_bytes()).hexdigest()
        if actual != digest:
            raise DataError(f"checksum mismatch for {path}: {actual} != {digest}")


def _load_idx_pair(root: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    names = ["train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
             "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"]
    paths = []
    for n in names:
        p = root / n
        if not p.exists():
            p = root / n[:-3]  # allow unzipped files
        if not p.exists():
            raise DataError(f"missing dataset file {root / n} (run the fetch-data command)")
        paths.append(p)
    _verify_manifest(root)
    xtr, ytr, xte, yte = (_read_idx(p) for p in paths)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise DataError(f"image/label counts disagree under {root}")
    return xtr, ytr, xte, yte


def load_mnist_arrays(root: Path):
    xtr, ytr, xte, yte = _load_idx_pair(Path(root))
    return xtr[:, None], ytr.astype(np.int64), xte[:, None], yte.astype(np.int64)


def load_svhn_arrays(root: Path):
    from scipy.io import loadmat

    root = Path(root)
    out = []
    for name in ("train_32x32.mat", "test_32x32.mat"):
        path = root / name
        if not path.exists():
            raise DataError(f"missing dataset file {path} (run the fetch-data command)")
        mat = loadmat(path)
        x = mat["X"].transpose(3, 2, 0, 1)  # (n, c, h, w)
        y = mat["y"].reshape(-1).astype(np.int64) % 10  # label 10 means digit 0
        out += [x, y]
    _verify_manifest(root)
    return tuple(out)


def load_dsprites_grid(root: Path) -> FactorDataset:
    path = Path(root) / "dsprites.npz"
    if not path.exists():
        raise DataError(f"missing dataset file {path} (run the fetch-data command)")
    with np.load(path, allow_pickle=True) as z:
        imgs = z["imgs"]  # (737280, 64, 64) uint8 in {0, 1}
        classes = z["latents_classes"].astype(np.int64)
    spec = FactorSpec((1, 3, 6, 40, 32, 32))
    return FactorDataset((imgs * 255).astype(np.uint8)[:, None], classes, spec)


def fetch(root: Path, names: list[str]) -> None:
    """Download the requested datasets (network access required) and record
    checksums in per-dataset manifests."""
    for name in names:
        if name not in DATASET_URLS:
            raise ConfigError(f"no download recipe for dataset '{name}'")
        target = Path(root) / name
        target.mkdir(parents=True, exist_ok=True)
        digests = {}
        for filename, url in DATASET_URLS[name].items():
            dest = target / filename
            if not dest.exists():
                print(f"fetching {url}")
                try:
                    with urllib.request.urlopen(url) as resp:
                        dest.write_bytes(resp.read())
                except OSError as exc:
                    raise DataError(f"download failed for {url}: {exc}") from exc
            digests[filename] = hashlib.sha256(dest.read_bytes()).hexdigest()
        (target / "manifest.json").write_text(json.dumps(digests, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Procedural datasets
# ---------------------------------------------------------------------------

def make_spiral(n: int, noise_sd: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy points on a three-turn spiral inside the unit disk.

    theta ~ Uniform(0, 6*pi), radius = theta / (6*pi), plus isotropic Gaussian
    noise of scale ``noise_sd`` per coordinate.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be nonnegative, got {noise_sd}")
    theta = rng.uniform(0.0, SPIRAL_TURNS_RADIANS, size=n)
    radius = theta / SPIRAL_TURNS_RADIANS
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    pts += rng.normal(0.0, noise_sd, size=(n, 2))
    return pts.astype(np.float32)


def spiral_curve(n: int = 4096) -> np.ndarray:
    """Dense noise-free reference sample of the ideal spiral curve."""
    theta = np.linspace(0.0, SPIRAL_TURNS_RADIANS, n)
    radius = theta / SPIRAL_TURNS_RADIANS
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).astype(np.float32)


def _dilate(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1)
    h, w = img.shape
    return np.maximum.reduce([p[i:i + h, j:j + w] for i in range(3) for j in range(3)])


def _render_glyph(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    cx = size / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    dy, dx = yy - cy, xx - cx
    scale = size / 16.0
    t = 0.75 * scale
    if family == "ring":
        radius = rng.uniform(3.5, 5.5) * scale
        band = np.abs(np.hypot(dy, dx) - radius) <= t
    elif family == "cross":
        extent = rng.uniform(4.0, 6.0) * scale
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= extent
        band = inside & ((np.abs(dy - dx) <= t * 1.4) | (np.abs(dy + dx) <= t * 1.4))
    elif family == "bars":
        extent = rng.uniform(4.0, 6.0) * scale
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= extent
        band = inside & ((np.abs(dy) <= t) | (np.abs(dx) <= t))
    elif family == "wedge":
        slope = rng.uniform(0.6, 1.1)
        band = (np.abs(dy - slope * np.abs(dx) + 2.0 * scale) <= t * 1.3) & (np.abs(dx) <= 6.0 * scale)
    else:
        raise ValueError(f"unknown glyph family '{family}'")
    return band.astype(np.float64)


def make_glyphs(n: int, rng: np.random.Generator, size: int = 16):
    """Synthetic glyph images tagged with two binary attributes.

    Attribute 0 ("thick") dilates the stroke by one pixel; attribute 1
    ("inverted") flips foreground and background. Returns uint8 images
    (n, 1, size, size), family class labels and (n, 2) attribute vectors.
    """
    images = np.empty((n, 1, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    attrs = np.empty((n, 2), dtype=np.float32)
    for i in range(n):
        fam = int(rng.integers(len(GLYPH_FAMILIES)))
        img = _render_glyph(GLYPH_FAMILIES[fam], size, rng)
        thick = int(rng.random() < 0.5)
        invert = int(rng.random() < 0.5)
        if thick:
            img = _dilate(img)
        if invert:
            img = 1.0 - img
        images[i, 0] = np.round(img * 255).astype(np.uint8)
        labels[i] = fam
        attrs[i] = (thick, invert)
    return images, labels, attrs


def make_toyfactor_grid(cardinalities: tuple[int, ...] = TOYFACTOR_CARDINALITIES,
                        size: int = 8) -> FactorDataset:
    """A small synthetic factor grid whose images encode the factor classes
    directly in the first pixels of the top row (rescaled per cardinality),
    which makes oracle encoders trivial to construct."""
    spec = FactorSpec(cardinalities)
    grids = np.meshgrid(*[np.arange(c) for c in cardinalities], indexing="ij")
    classes = np.stack([g.reshape(-1) for g in grids], axis=1).astype(np.int64)
    images = np.zeros((spec.size, 1, size, size), dtype=np.uint8)
    for j, c in enumerate(cardinalities):
        denom = max(c - 1, 1)
        images[:, 0, 0, j] = np.round(classes[:, j] / denom * 255).astype(np.uint8)
    # A little deterministic texture so the grid is not almost-everywhere zero.
    images[:, 0, 1:, :] = ((classes.sum(axis=1) * 37) % 200)[:, None, None].astype(np.uint8)
    return FactorDataset(images, classes, spec)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def _carve_val(x, labels, attrs, factors, val_count: int, rng: np.random.Generator):
    n = len(x)
    if not (0 < val_count < n):
        raise ConfigError(f"val_count={val_count} must be in (0, {n}) for this dataset")
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:val_count], perm[val_count:]
    def pick(a, idx):
        return None if a is None else a[idx]
    return (Split(x[train_idx], pick(labels, train_idx), pick(attrs, train_idx), pick(factors, train_idx)),
            Split(x[val_idx], pick(labels, val_idx), pick(attrs, val_idx), pick(factors, val_idx)))


def ablate(dataset: Dataset, n_keep: int, rng: np.random.Generator) -> Dataset:
    """Retain a uniform random subset of the training split; other splits
    untouched. Deterministic under the generator's seed."""
    n = len(dataset.train)
    if n_keep <= 0:
        raise ValueError(f"n_keep must be positive, got {n_keep}")
    if n_keep > n:
        raise ValueError(f"n_keep={n_keep} exceeds the training split size {n}")
    if n_keep == n:
        return dataset
    idx = rng.choice(n, size=n_keep, replace=False)
    return replace(dataset, train=dataset.train.subset(idx))


def load_dataset(name: str, root: str | Path = "data", val_count: int = 5000,
                 seed: int = 0, spiral_n: int = 4096, spiral_noise_sd: float = 0.01,
                 glyph_n: int = 8000, val_from_test: bool = False) -> Dataset:
    """Assemble a named dataset with a held-out validation split.

    Validation is carved from the training data by default (the official test
    split stays untouched); ``val_from_test=True`` validates on the official
    test split instead.
    """
    rng = np.random.default_rng([seed, 0xDA7A])
    root = Path(root)
    name = name.lower()
    if name in ("mnist", "kmnist"):
        xtr, ytr, xte, yte = load_mnist_arrays(root / name)
        return _image_dataset(name, xtr, ytr, None, xte, yte, 10, val_count, rng, val_from_test)
    if name == "svhn":
        xtr, ytr, xte, yte = load_svhn_arrays(root / name)
        return _image_dataset(name, xtr, ytr, None, xte, yte, 10, val_count, rng, val_from_test)
    if name == "mnist_attrs":
        xtr, ytr, xte, yte = load_mnist_arrays(root / "mnist")
        xa, attrs = attach_attribute_transforms(xtr, rng)
        ds = _image_dataset(name, xa, ytr, attrs, None, None, 10, val_count, rng, False)
        ds.n_attributes = 2
        return ds
    if name == "glyphs":
        images, labels, attrs = make_glyphs(glyph_n, rng)
        ds = _image_dataset(name, images, labels, attrs, None, None,
                            len(GLYPH_FAMILIES), val_count, rng, False)
        ds.n_attributes = 2
        return ds
    if name == "dsprites":
        grid = load_dsprites_grid(root / "dsprites")
        return _factor_grid_dataset(name, grid, val_count, rng)
    if name == "toyfactors":
        grid = make_toyfactor_grid()
        return _factor_grid_dataset(name, grid, val_count, rng)
    if name == "spiral":
        pts = make_spiral(spiral_n + val_count, spiral_noise_sd, rng)
        train, val = pts[val_count:], pts[:val_count]
        return Dataset(name="spiral", kind="points", input_shape=(2,),
                       train=Split(train), val=Split(val))
    raise ConfigError(f"unknown dataset '{name}'")


def _image_dataset(name, xtr, ytr, attrs, xte, yte, n_classes, val_count, rng,
                   val_from_test) -> Dataset:
    x = normalize_images(xtr)
    test = None
    if xte is not None:
        test = Split(normalize_images(xte), yte)
    if val_from_test:
        if test is None:
            raise ConfigError(f"dataset '{name}' has no official test split to validate on")
        train, val = Split(x, ytr, attrs), test
    else:
        train, val = _carve_val(x, ytr, attrs, None, val_count, rng)
    return Dataset(name=name, kind="image", input_shape=x.shape[1:],
                   train=train, val=val, test=test, n_classes=n_classes)


def _factor_grid_dataset(name, grid: FactorDataset, val_count, rng) -> Dataset:
    x = normalize_images(grid.images)
    train, val = _carve_val(x, None, None, grid.factor_classes, val_count, rng)
    return Dataset(name=name, kind="image", input_shape=x.shape[1:], train=train,
                   val=val, factor_spec=grid.spec)


def attach_attribute_transforms(images_uint8: np.ndarray, rng: np.random.Generator):
    """Tag images with two synthetic binary attributes: thick-stroke
    (one-pixel dilation) and inverted (pixel negation)."""
    n = len(images_uint8)
    attrs = (rng.random((n, 2)) < 0.5).astype(np.float32)
    out = images_uint8.copy()
    for i in range(n):
        img = out[i, 0]
        if attrs[i, 0]:
            img = _dilate(img)
        if attrs[i, 1]:
            img = 255 - img
        out[i, 0] = img
    return out, attrs


def load_factor_grid(name: str, root: str | Path = "data") -> FactorDataset:
    """The pristine full factor grid used by the disentanglement protocol."""
    if name == "dsprites":
        return load_dsprites_grid(Path(root) / "dsprites")
    if name == "toyfactors":
        return make_toyfactor_grid()
    raise ConfigError(f"dataset '{name}' has no ground-truth factor annotations")
