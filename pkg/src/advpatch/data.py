"""Datasets: an offline synthetic shapes generator and a CIFAR-10 binary reader.

The synthetic set has 10 classes (5 geometric figures x 2 color families)
drawn on textured backgrounds, 32x32 RGB in [0,1], exactly balanced.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

N_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)

_SHAPES = ("circle", "square", "triangle", "plus", "diamond")
_COLOR_FAMILIES = ("warm", "cool")

CLASS_NAMES = tuple(f"{s}-{c}" for s in _SHAPES for c in _COLOR_FAMILIES)


@dataclass
class Dataset:
    """Images [N,C,H,W] in [0,1] with integer labels and a train/test split."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.name}: images {self.images.shape} / labels {self.labels.shape} mismatch")
        if self.images.size == 0:
            raise DataError(f"{self.name}: empty dataset")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError(f"{self.name}: pixel values outside [0,1]")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"{self.name}: label outside [0,{self.n_classes})")
        both = np.concatenate([self.train_indices, self.test_indices])
        if len(np.unique(both)) != len(both) or len(both) != len(self.labels):
            raise DataError(f"{self.name}: train/test split must be disjoint and covering")

    @property
    def train_images(self) -> np.ndarray:
        return self.images[self.train_indices]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_indices]

    @property
    def test_images(self) -> np.ndarray:
        return self.images[self.test_indices]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_indices]

    def split(self, which: str):
        if which == "train":
            return self.train_images, self.train_labels
        if which == "test":
            return self.test_images, self.test_labels
        raise DataError(f"unknown split {which!r}")


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsample of a small [g,g,3] grid to [size,size,3]."""
    g = grid.shape[0]
    pos = (np.arange(size) + 0.5) * g / size - 0.5
    i0 = np.clip(np.floor(pos).astype(int), 0, g - 1)
    i1 = np.clip(i0 + 1, 0, g - 1)
    f = np.clip(pos - np.floor(pos), 0.0, 1.0)
    a = grid[np.ix_(i0, i0)]
    b = grid[np.ix_(i0, i1)]
    c = grid[np.ix_(i1, i0)]
    d = grid[np.ix_(i1, i1)]
    fy = f[:, None, None]
    fx = f[None, :, None]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy + 0.5 - cy
    dx = xx + 0.5 - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
    if kind == "triangle":
        # upward triangle: below the apex, above the base, inside the slanted sides
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "plus":
        arm = r * 0.38
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.15
    raise ValueError(f"unknown shape {kind!r}")


def _render_sample(rng: np.random.Generator, label: int) -> np.ndarray:
    """One 32x32x3 sample of the given class, textured background + figure."""
    size = 32
    shape_kind = _SHAPES[label // 2]
    family = _COLOR_FAMILIES[label % 2]

    base = rng.uniform(0.25, 0.55, size=3)
    texture = _upsample_bilinear(rng.uniform(-1.0, 1.0, size=(4, 4, 3)), size) * 0.12
    img = np.clip(base[None, None, :] + texture, 0.0, 1.0)

    cy = size / 2 + rng.uniform(-4.0, 4.0)
    cx = size / 2 + rng.uniform(-4.0, 4.0)
    r = rng.uniform(7.0, 11.0)
    mask = _shape_mask(shape_kind, size, cy, cx, r)

    hi = rng.uniform(0.75, 1.0)
    lo = rng.uniform(0.0, 0.2)
    mid = rng.uniform(0.0, 0.35)
    if family == "warm":
        color = np.array([hi, mid, lo])
    else:
        color = np.array([lo, mid, hi])
    img[mask] = color

    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def generate_synthetic(seed: int, n_train: int = 6000, n_test: int = 1000) -> Dataset:
    """Deterministic balanced shapes dataset; counts must be multiples of 10
    with at least 10 samples per class in each split."""
    for name, n in (("n_train", n_train), ("n_test", n_test)):
        if n % N_CLASSES != 0:
            raise ConfigError(f"{name}={n} must be a multiple of {N_CLASSES} for exact balance")
        if n < 10 * N_CLASSES:
            raise ConfigError(f"{name}={n} gives fewer than 10 samples per class")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_total = n_train + n_test
    images = np.empty((n_total, *IMAGE_SHAPE))
    labels = np.empty(n_total, dtype=np.int64)
    # class-major generation keeps the stream layout independent of the split
    per_class = n_total // N_CLASSES
    i = 0
    for cls in range(N_CLASSES):
        for _ in range(per_class):
            images[i] = _render_sample(rng, cls)
            labels[i] = cls
            i += 1
    train_idx, test_idx = [], []
    per_train = n_train // N_CLASSES
    for cls in range(N_CLASSES):
        start = cls * per_class
        train_idx.extend(range(start, start + per_train))
        test_idx.extend(range(start + per_train, start + per_class))
    return Dataset(
        name=f"synthetic-{seed}",
        images=images,
        labels=labels,
        train_indices=np.array(train_idx, dtype=np.int64),
        test_indices=np.array(test_idx, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: 3073-byte records, 1 label byte + 3072 pixel bytes
# (channel-planar R,G,B, each 32x32 row-major), pixels mapped to [0,1] by /255.

_RECORD = 3073
_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_TEST_FILE = "test_batch.bin"


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _RECORD != 0:
        expected = (raw.size // _RECORD + 1) * _RECORD
        raise FormatError(
            f"{os.path.basename(path)}: expected a multiple of {_RECORD} bytes "
            f"(e.g. {expected}), got {raw.size}",
            offset=raw.size - raw.size % _RECORD,
        )
    rec = raw.reshape(-1, _RECORD)
    labels = rec[:, 0].astype(np.int64)
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10(directory: str) -> Dataset:
    """Read the standard CIFAR-10 binary batches from a directory."""
    paths = [os.path.join(directory, f) for f in _TRAIN_FILES + (_TEST_FILE,)]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DataError(f"cifar10: missing batch file(s): {', '.join(missing)}")
    train_parts = [_read_cifar_file(p) for p in paths[:-1]]
    test_images, test_labels = _read_cifar_file(paths[-1])
    images = np.concatenate([p[0] for p in train_parts] + [test_images])
    labels = np.concatenate([p[1] for p in train_parts] + [test_labels])
    n_train = sum(len(p[1]) for p in train_parts)
    return Dataset(
        name="cifar10",
        images=images,
        labels=labels,
        train_indices=np.arange(n_train, dtype=np.int64),
        test_indices=np.arange(n_train, len(labels), dtype=np.int64),
    )
