"""Datasets and Poisson batching.

Supports IDX-format image/label files (big-endian, magic 0x803 for images
and 0x801 for labels) and a seeded synthetic Gaussian-blob generator whose
class means sit at a fixed pairwise distance.  Batches are Poisson sampled:
every example enters a batch independently with probability q, which is the
sampling semantics the privacy accountant assumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DatasetHandle:
    X: np.ndarray  # (N, D) float64
    y: np.ndarray  # (N,) int64
    n_classes: int
    image_shape: tuple | None = None  # (C, H, W) when image-structured

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise DataFormatError(
                f"{self.X.shape[0]} examples but {self.y.shape[0]} labels"
            )

    def __len__(self):
        return self.X.shape[0]


def _read_idx(path, expected_magic: int):
    with open(path, "rb") as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise DataFormatError(f"{path}: truncated header at byte 0")
        (magic,) = struct.unpack(">i", header)
        if magic != expected_magic:
            raise DataFormatError(
                f"{path}: magic 0x{magic:08x} at byte 0, expected "
                f"0x{expected_magic:08x}"
            )
        n_dims = magic & 0xFF
        dim_bytes = fh.read(4 * n_dims)
        if len(dim_bytes) < 4 * n_dims:
            raise DataFormatError(
                f"{path}: truncated dimension header at byte "
                f"{4 + len(dim_bytes)}"
            )
        dims = struct.unpack(f">{n_dims}i", dim_bytes)
        expected = int(np.prod(dims))
        payload = fh.read()
        if len(payload) != expected:
            raise DataFormatError(
                f"{path}: expected {expected} payload bytes after offset "
                f"{4 + 4 * n_dims}, found {len(payload)}"
            )
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_dataset(images_path, labels_path,
                     n_classes: int | None = None) -> DatasetHandle:
    """Load an IDX image/label pair, normalizing pixels into [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    y = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 0
    bad = (y < 0) | (y >= n_classes)
    if np.any(bad):
        first = int(np.argmax(bad))
        raise DataFormatError(
            f"label {y[first]} at index {first} outside [0, {n_classes})"
        )
    h, w = images.shape[1], images.shape[2]
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return DatasetHandle(X=X, y=y, n_classes=n_classes, image_shape=(1, h, w))


def synth_dataset(n_classes: int, n_per_class: int, dim: int,
                  separation: float, seed: int,
                  image_shape: tuple | None = None) -> DatasetHandle:
    """Gaussian class blobs with pairwise mean distance ``separation``.

    Means are orthonormal directions scaled by separation / sqrt(2), so every
    pair of class means is exactly ``separation`` apart; unit isotropic noise
    is added per example.  A linear classifier separates the classes once
    separation is a few noise standard deviations.
    """
    if separation < 0:
        raise ConfigError(f"separation must be >= 0, got {separation}")
    if dim < n_classes:
        raise ConfigError(
            f"dim {dim} must be >= n_classes {n_classes} for orthogonal means"
        )
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    means = (separation / np.sqrt(2.0)) * basis.T  # (n_classes, dim)
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = means[y] + rng.standard_normal((y.shape[0], dim))
    order = rng.permutation(y.shape[0])
    return DatasetHandle(
        X=X[order], y=y[order].astype(np.int64), n_classes=n_classes,
        image_shape=image_shape,
    )


def poisson_batches(n_examples: int, q: float, rng):
    """Infinite stream of Poisson-sampled index arrays.

    Each example is included independently with probability q per batch, so
    the expected batch size is ``q * n_examples`` and occasional empty
    batches are possible at small q.
    """
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"sampling rate must be in (0, 1], got {q}")
    while True:
        mask = rng.random(n_examples) < q
        yield np.flatnonzero(mask)


def split_holdout(handle: DatasetHandle, fraction: float, seed: int):
    """Seeded shuffle split into (train, validation) handles."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(handle)
    n_val = max(1, int(round(fraction * n)))
    order = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    make = lambda idx: DatasetHandle(
        X=handle.X[idx], y=handle.y[idx], n_classes=handle.n_classes,
        image_shape=handle.image_shape,
    )
    return make(train_idx), make(val_idx)
