"""CIFAR-10 binary batches and a synthetic blob-image generator."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import Prng

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
DATA_DIR_ENV = "BNLAB_DATA_DIR"


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, 3, H, W], values in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str
    classes: int
    mean: np.ndarray | None = None  # per-pixel mean image of the training split

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on the number of examples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def with_mean(self, mean: np.ndarray) -> "Dataset":
        return replace(self, mean=np.asarray(mean, dtype=np.float32))

    def normalized(self, idx=None) -> np.ndarray:
        x = self.images if idx is None else self.images[idx]
        return x - self.mean if self.mean is not None else x


def pixel_mean(train: Dataset) -> np.ndarray:
    return train.images.mean(axis=0, dtype=np.float64).astype(np.float32)


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if not raw or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} >= 10 at offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory: str | os.PathLike | None = None) -> dict[str, Dataset]:
    """Load the five training batches and the test batch from ``directory``.

    Pixels are scaled to [0, 1]; both splits carry the training-split mean.
    """
    directory = Path(directory or os.environ.get(DATA_DIR_ENV, "."))
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (directory / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 batch files {missing}")
    parts = [read_cifar_batch(directory / f) for f in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), "train", 10)
    ti, tl = read_cifar_batch(directory / CIFAR_TEST_FILE)
    mean = pixel_mean(train)
    return {"train": train.with_mean(mean), "test": Dataset(ti, tl, "test", 10, mean)}


def _prototypes(classes: int, clusters: int, size: int, rng: Prng) -> np.ndarray:
    """Smooth unit-RMS colour patterns, one per (class, cluster)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.zeros((classes, clusters, 3, size, size))
    for c in range(classes):
        for k in range(clusters):
            img = np.zeros((3, size, size))
            for _ in range(3):
                cy, cx = rng.uniform(0, size, 2)
                sigma = rng.uniform(0.12, 0.3, 1)[0] * size
                colour = rng.uniform(-1, 1, 3)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
                img += colour[:, None, None] * blob[None]
            img -= img.mean()
            protos[c, k] = img / np.sqrt((img**2).mean())
    return protos


def synthetic_dataset(classes: int, n: int, image_size: int, separation: float, rng: Prng,
                      split: str = "train", clusters_per_class: int = 2, noise: float = 0.2) -> Dataset:
    """Balanced class-conditional blob images.

    Each class has ``clusters_per_class`` prototype patterns drawn from
    ``rng.child("prototypes")``; a sample is ``0.5 + 0.1 * separation *
    prototype + noise * N(0, 1)`` clipped to [0, 1]. Calls with the same
    ``rng`` seed but different ``split`` share prototypes and differ in
    samples. ``separation = 0`` carries no class signal.
    """
    if n % classes:
        raise ValueError(f"n={n} must be divisible by classes={classes}")
    protos = _prototypes(classes, clusters_per_class, image_size, rng.child("prototypes"))
    r = rng.child(f"samples/{split}")
    labels = np.repeat(np.arange(classes), n // classes)
    labels = labels[r.permutation(n)]
    cluster = r.integers(0, clusters_per_class, n)
    base = protos[labels, cluster]
    x = 0.5 + 0.1 * separation * base + noise * r.normal(base.shape)
    images = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), split, classes)


def synthetic_splits(classes: int = 10, n_train: int = 2000, n_test: int = 1000, image_size: int = 16,
                     separation: float = 1.0, seed: int = 0, clusters_per_class: int = 2,
                     noise: float = 0.2) -> dict[str, Dataset]:
    rng = Prng(seed)
    train = synthetic_dataset(classes, n_train, image_size, separation, rng, "train", clusters_per_class, noise)
    test = synthetic_dataset(classes, n_test, image_size, separation, rng, "test", clusters_per_class, noise)
    mean = pixel_mean(train)
    return {"train": train.with_mean(mean), "test": test.with_mean(mean)}
