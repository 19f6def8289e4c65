"""Datasets, validation split, augmentation and input normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CIFAR_LABEL_BYTES = 1
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD_BYTES = CIFAR_LABEL_BYTES + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

# Mid-value and half-range of 8-bit data, used by fixed normalization.
FIXED_MEAN = 128.0
FIXED_SCALE = 128.0
# Offline normalization never divides by a std below this.
OFFLINE_STD_FLOOR = 1e-3


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) or (N, F); uint8 when raw 8-bit
    labels: np.ndarray  # int64 class indices
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def load_cifar10_bin(paths: str | Path | Iterable[str | Path]) -> Dataset:
    """Read one or more files in the CIFAR-10 binary layout.

    Each 3073-byte record is a label byte (0-9) followed by the red, green
    and blue 32x32 planes in row-major order. Pixels stay raw uint8.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD_BYTES:
            raise ValueError(f"{path}: {raw.size} bytes is not a multiple of {CIFAR_RECORD_BYTES}")
        rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
        lab = rec[:, 0]
        if lab.size and lab.max() > 9:
            bad = int(np.argmax(lab > 9))
            raise ValueError(f"{path}: record {bad} has label byte {lab[bad]} (> 9)")
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape((-1,) + CIFAR_IMAGE_SHAPE))
    if not images:
        raise ValueError("no CIFAR-10 files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


def write_cifar10_bin(path: str | Path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 ``(N, 3, 32, 32)`` images in the CIFAR-10 binary layout."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != CIFAR_IMAGE_SHAPE:
        raise ValueError(f"expected uint8 images of shape (N, 3, 32, 32), got "
                         f"{images.dtype} {images.shape}")
    lab = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    np.concatenate([lab, images.reshape(len(images), -1)], axis=1).tofile(path)


def load_cifar10_dir(root: str | Path) -> tuple[Dataset, Dataset]:
    """Train and test sets from an extracted ``cifar-10-batches-bin`` directory."""
    root = Path(root)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (root / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{root}: missing CIFAR-10 files {missing}")
    train = load_cifar10_bin([root / f for f in CIFAR_TRAIN_FILES])
    test = load_cifar10_bin(root / CIFAR_TEST_FILE)
    return train, test


def class_balanced_subset(ds: Dataset, cap: int | None) -> Dataset:
    """First ``cap // num_classes`` examples of each class, in file order."""
    if cap is None or cap >= len(ds):
        return ds
    per_class = cap // ds.num_classes
    keep = np.concatenate([np.flatnonzero(ds.labels == c)[:per_class]
                           for c in range(ds.num_classes)])
    return ds.take(np.sort(keep))


def synth_dataset(num_classes: int, per_class: int, image_shape: Sequence[int],
                  rng: np.random.Generator, noise_std: float = 1.0,
                  class_rng: np.random.Generator | None = None) -> Dataset:
    """Class-conditional Gaussian images around class-specific mean patterns.

    For ``(C, H, W)`` shapes a class mean is a per-channel color offset plus
    an oriented sinusoidal grating, so local filters followed by global
    pooling can tell classes apart; for flat shapes it is a Gaussian vector.
    ``class_rng`` draws the class means (defaults to ``rng``); passing the
    same one for train and test keeps the classes consistent between them.
    """
    if per_class < 2:
        raise ValueError(f"per_class must be >= 2, got {per_class}")
    shape = tuple(int(s) for s in image_shape)
    class_rng = rng if class_rng is None else class_rng
    means = np.empty((num_classes,) + shape)
    if len(shape) == 3:
        c, h, w = shape
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        for k in range(num_classes):
            theta = class_rng.uniform(0, np.pi)
            freq = class_rng.uniform(0.05, 0.3)
            phase = class_rng.uniform(0, 2 * np.pi, size=c)
            color = class_rng.normal(0.0, 0.5, size=c)
            wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                          + phase[:, None, None])
            means[k] = color[:, None, None] + wave
    else:
        means[:] = class_rng.normal(0.0, 1.0, size=means.shape)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    images = means[labels] + rng.normal(0.0, 1.0, size=(len(labels),) + shape) * noise_std
    return Dataset(images, labels, num_classes)


def split_validation(ds: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Move ``round(fraction * n_c)`` random examples of each class to validation."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    train_idx, val_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if fraction > 0 and idx.size < 2:
            raise ValueError(f"class {c} has {idx.size} example(s); cannot split")
        n_val = min(int(math.floor(fraction * idx.size + 0.5)), idx.size - 1)
        perm = rng.permutation(idx)
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.array([], dtype=np.int64)
    return ds.take(train_idx), ds.take(val_idx.astype(np.int64))


def augment_hflip(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mirror each image left-right with probability 1/2 (one coin per image)."""
    if batch.ndim != 4:
        raise ValueError(f"hflip expects (N, C, H, W), got {batch.shape}")
    flip = rng.random(len(batch)) < 0.5
    out = batch.copy()
    out[flip] = batch[flip, :, :, ::-1]
    return out


@dataclass
class InputStats:
    mean: np.ndarray
    std: np.ndarray


def offline_stats(ds: Dataset) -> InputStats:
    """Per-channel dataset mean (average of per-image means) and std."""
    x = ds.images.astype(np.float64)
    axes = (2, 3) if x.ndim == 4 else ()
    per_image = x.mean(axis=axes) if axes else x
    mean = per_image.mean(axis=0)
    centered = x - (mean.reshape((1, -1) + (1,) * (x.ndim - 2)))
    std = np.sqrt((centered ** 2).mean(axis=(0,) + axes))
    return InputStats(mean, np.maximum(std, OFFLINE_STD_FLOOR))


def normalize_input(ds: Dataset, mode: str, stats: InputStats | None = None) -> Dataset:
    """Return a float64 copy of ``ds`` normalized according to ``mode``.

    ``fixed`` maps 8-bit pixels through (x - 128) / 128. ``offline`` uses
    per-channel statistics (from ``stats``, or computed from ``ds``). ``bn``
    passes raw values through unchanged; the network's input-norm BN does
    the work online.
    """
    x = ds.images
    if mode == "fixed":
        if x.dtype != np.uint8:
            raise ValueError("fixed normalization is defined for 8-bit images")
        out = (x.astype(np.float64) - FIXED_MEAN) / FIXED_SCALE
    elif mode == "offline":
        stats = stats or offline_stats(ds)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        out = (x.astype(np.float64) - stats.mean.reshape(shape)) / stats.std.reshape(shape)
    elif mode == "bn":
        out = x.astype(np.float64) / 1.0
    else:
        raise ValueError(f"unknown input normalization mode {mode!r}")
    return Dataset(out, ds.labels, ds.num_classes)
