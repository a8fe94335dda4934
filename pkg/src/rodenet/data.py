"""Datasets: CIFAR binary records, a seeded synthetic generator, normalisation."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
IMAGE_BYTES = 3 * 32 * 32


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``(n, 3, H, W)`` float64 and integer labels in ``[0, num_classes)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def read_cifar_bytes(buf: bytes, variant: str = "cifar100", label: str = "fine") -> Dataset:
    """Decode CIFAR binary records.

    CIFAR-100 records are ``<coarse><fine><3072 pixels>``; CIFAR-10 records are
    ``<label><3072 pixels>``.  Pixels are R plane, G plane, B plane, each
    row-major 32x32.  Images are returned scaled to ``[0, 1]``.
    """
    if variant == "cifar100":
        rec, num_classes = CIFAR100_RECORD, (20 if label == "coarse" else 100)
        label_off = 0 if label == "coarse" else 1
    elif variant == "cifar10":
        rec, num_classes, label_off = CIFAR10_RECORD, 10, 0
    else:
        raise DataError(f"unknown CIFAR variant {variant!r}")
    if len(buf) == 0 or len(buf) % rec:
        raise DataError(f"{variant}: byte length {len(buf)} is not a multiple of record size {rec}")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_off].astype(np.int64)
    images = arr[:, rec - IMAGE_BYTES:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes)


def load_cifar(path: str | os.PathLike, variant: str = "cifar100", label: str = "fine") -> Dataset:
    with open(path, "rb") as fh:
        return read_cifar_bytes(fh.read(), variant, label)


def write_cifar_bytes(ds: Dataset, variant: str = "cifar100") -> bytes:
    """Encode a dataset (pixels in [0, 1]) as CIFAR records; used for fixtures."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise DataError("CIFAR records hold 3x32x32 images")
    pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    lab = ds.labels.astype(np.uint8)[:, None]
    head = np.concatenate([lab, lab], axis=1) if variant == "cifar100" else lab
    return np.concatenate([head, pix], axis=1).tobytes()


def make_synthetic(n: int, num_classes: int = 4, image_size: int = 8, noise: float = 0.5,
                   seed: int = 0, channels: int = 3) -> Dataset:
    """Gaussian class prototypes plus isotropic noise, deterministic in ``seed``."""
    if n < 1 or num_classes < 1:
        raise DataError("synthetic dataset needs n >= 1 and num_classes >= 1")
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(num_classes, channels, image_size, image_size))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = protos[labels] + noise * rng.normal(size=(n, channels, image_size, image_size))
    return Dataset(images, labels, num_classes)


class ChannelNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel standardisation of ``(n, C, H, W)`` image stacks.

    Statistics come from the training split and travel with the checkpoint.
    """

    def __init__(self, eps=1e-8):
        self.eps = eps

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise DataError(f"expected (n, C, H, W), got {X.shape}")
        self.mean_ = X.mean(axis=(0, 2, 3))
        self.std_ = X.std(axis=(0, 2, 3))
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        shape = (-1, 1, 1)
        return (X - self.mean_.reshape(shape)) / (self.std_.reshape(shape) + self.eps)
