"""CIFAR-10 binary loader and a seeded synthetic stand-in."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray   # (n,) int64
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.classes)


def read_cifar10_batch(path, split: str = "train") -> Dataset:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"CIFAR-10 batch not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise ValueError(f"{path}: size {raw.size} is not a positive multiple of {RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / np.float32(255)
    return Dataset(images, labels, split, 10)


def write_cifar10_batch(dataset: Dataset, path) -> None:
    """Writes ``dataset`` in the 3073-byte record layout (pixels rounded to bytes)."""
    if dataset.shape != CIFAR_SHAPE:
        raise ValueError(f"CIFAR-10 records hold {CIFAR_SHAPE} images, got {dataset.shape}")
    pixels = np.rint(dataset.images.reshape(len(dataset), -1) * 255).astype(np.uint8)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    records.tofile(path)


def _concat(parts: list[Dataset], split: str) -> Dataset:
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), split, 10)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Loads the five training batches and the test batch from ``directory``."""
    train = [read_cifar10_batch(os.path.join(directory, f), "train") for f in TRAIN_FILES]
    test = [read_cifar10_batch(os.path.join(directory, f), "test") for f in TEST_FILES]
    return _concat(train, "train"), _concat(test, "test")


def class_means(seed: int, classes: int, shape) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5EED])
    return rng.uniform(0.2, 0.8, size=(classes, *shape)).astype(np.float32)


def synth_dataset(seed: int, n: int, classes: int = 10, shape=(3, 8, 8), noise: float = 0.1,
                  split: str = "train", means_seed: int | None = None) -> Dataset:
    """Gaussian class blobs around seeded mean images, clamped to [0, 1].

    ``means_seed`` fixes the class patterns independently of the sample noise so
    train and test splits can share one distribution.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    mu = class_means(seed if means_seed is None else means_seed, classes, shape)
    rng = np.random.default_rng([seed, n, 0xDA7A])
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = mu[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, split, classes)


def synth_split(seed: int, n_train: int, n_test: int, classes: int = 10, shape=(3, 8, 8),
                noise: float = 0.1) -> tuple[Dataset, Dataset]:
    train = synth_dataset(seed, n_train, classes, shape, noise, "train", means_seed=seed)
    test = synth_dataset(seed + 1_000_003, n_test, classes, shape, noise, "test", means_seed=seed)
    return train, test


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Stratified sample without replacement; per-class counts within 1 of proportional."""
    if n <= 0:
        raise ValueError("subsample size must be positive")
    if n > len(dataset):
        raise ValueError(f"cannot draw {n} samples from a dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    exact = counts * n / len(dataset)
    quota = np.floor(exact).astype(int)
    # largest remainders get the leftover slots
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[: n - quota.sum()]] += 1
    picked = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(dataset.labels == cls)
        picked.append(rng.choice(members, size=q, replace=False))
    idx = rng.permutation(np.concatenate(picked))
    return dataset.take(idx)


def disjoint_halves(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Two stratified halves sharing no sample; odd class counts give the extra one to the first."""
    rng = np.random.default_rng(seed)
    first, second = [], []
    for cls in np.unique(dataset.labels):
        members = rng.permutation(np.flatnonzero(dataset.labels == cls))
        cut = (len(members) + 1) // 2
        first.append(members[:cut])
        second.append(members[cut:])
    a, b = (rng.permutation(np.concatenate(p)) for p in (first, second))
    return dataset.take(a), dataset.take(b)
