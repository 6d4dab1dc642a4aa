"""Dataset ingestion: CIFAR-10 binary files and a procedural stand-in.

Both sources produce the same Dataset shape: float32 N x C x H x W images
standardized per channel (statistics always taken from the training split
and passed along to other splits) plus integer labels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rng import Rng

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_CLASSES = 10


class DataError(ValueError):
    """Dataset missing, truncated, or containing out-of-range labels."""


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float32, standardized
    labels: np.ndarray  # N int64 in [0, classes)
    classes: int
    split: str
    mean: np.ndarray  # per-channel stats the standardization used
    std: np.ndarray

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.std


def _standardize(images: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None):
    """Per-channel zero-mean unit-std; degenerate channels are only centered."""
    if stats is None:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
    else:
        mean, std = stats
    out = (images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return out.astype(np.float32), mean.astype(np.float64), std.astype(np.float64)


def load_cifar10_binary(path: str, split: str = "train",
                        stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Read CIFAR-10 binary records (label byte + RGB planes, 3073 bytes each).

    `path` is one .bin file or a directory of them (read in sorted order).
    Pixels are mapped to [0, 1] then standardized; pass the training split's
    stats() when loading evaluation data.
    """
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
        )
        if not files:
            raise DataError(f"no .bin files found in directory {path!r}")
    elif os.path.isfile(path):
        files = [path]
    else:
        raise DataError(f"dataset path {path!r} does not exist")
    chunks = []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            offset = raw.size - raw.size % CIFAR_RECORD_BYTES
            raise DataError(
                f"{f}: truncated record at byte offset {offset} "
                f"(file size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES})"
            )
        chunks.append(raw.reshape(-1, CIFAR_RECORD_BYTES))
    records = np.concatenate(chunks, axis=0)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DataError(
            f"label {int(labels[bad[0]])} out of range [0, {CIFAR_CLASSES}) "
            f"at record {int(bad[0])}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    images, mean, std = _standardize(images, stats)
    return Dataset(images, labels, CIFAR_CLASSES, split, mean, std)


def synth_dataset(seed: int, n: int, classes: int = 10,
                  stats: tuple[np.ndarray, np.ndarray] | None = None,
                  split: str = "train") -> Dataset:
    """Procedural 3 x 32 x 32 dataset with linearly separable classes.

    Each class owns an oriented grating: orientation, spatial frequency, and
    phase are functions of the class index, so raw pixels already separate
    the classes; per-sample amplitude jitter and Gaussian noise keep the
    problem non-trivial.  Labels are balanced by interleaving.
    """
    if n < classes:
        raise DataError(f"need at least one sample per class: n={n} < classes={classes}")
    rng = Rng(seed)
    labels = (np.arange(n) % classes).astype(np.int64)
    u, v = np.meshgrid(np.arange(32, dtype=np.float64),
                       np.arange(32, dtype=np.float64), indexing="ij")
    bases = np.empty((classes, 3, 32, 32), dtype=np.float64)
    for c in range(classes):
        theta = np.pi * c / classes
        freq = 1.0 + (c % 5)
        phase = 2.0 * np.pi * c / classes
        along = (u * np.cos(theta) + v * np.sin(theta)) / 32.0
        for ch in range(3):
            bases[c, ch] = np.sin(2.0 * np.pi * freq * along + phase + ch * np.pi / 3.0)
    amps = rng.uniform((n,), 0.6, 1.4)
    noise = rng.normal((n, 3, 32, 32), 0.0, 0.3)
    images = amps[:, None, None, None] * bases[labels] + noise
    images, mean, std = _standardize(images, stats)
    return Dataset(images, labels, classes, split, mean, std)
