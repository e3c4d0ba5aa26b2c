"""Dataset loading: MNIST-style IDX files and CIFAR-10 binary batches.

Images come back as float32 [n, ch, H, W], normalized with the fixed
per-channel constants below; labels as int64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

CIFAR10_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels, channel-planar


@dataclass
class Dataset:
    images: np.ndarray   # [n, ch, H, W] float32
    labels: np.ndarray   # [n] int64
    split: str = ""

    def __len__(self):
        return self.images.shape[0]


def _read_idx(path, expected_magic: int, ndim: int, what: str) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {what} file {path}: {e}") from e
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{what} file {path}: truncated header "
                        f"({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{what} file {path}: magic {magic:#010x}, "
                        f"expected {expected_magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    need = 1
    for d in dims:
        need *= d
    payload = raw[4 + 4 * ndim:]
    if len(payload) != need:
        raise DataError(f"{what} file {path}: payload holds {len(payload)} "
                        f"bytes, dims {dims} need {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "") -> Dataset:
    """Read an IDX image/label file pair and normalize to the usual MNIST
    statistics ((x/255 - 0.1307) / 0.3081)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise DataError(f"{images_path}: empty dataset")
    n, h, w = images.shape
    x = images.astype(np.float32) / 255.0
    x = (x - MNIST_MEAN) / MNIST_STD
    return Dataset(np.ascontiguousarray(x.reshape(n, 1, h, w)),
                   labels.astype(np.int64), split)


def load_cifar10_bin(paths, fraction: float = 1.0, seed: int = 0,
                     split: str = "") -> Dataset:
    """Read CIFAR-10 binary batches.

    ``fraction`` < 1 keeps exactly floor(fraction * per-class count)
    samples of each class, uniformly sampled under ``seed``; the selection
    preserves file order. ``fraction`` 1.0 returns every record in order.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images = []
    labels = []
    for path in paths:
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise DataError(f"cannot read CIFAR batch {path}: {e}") from e
        if len(raw) == 0 or len(raw) % CIFAR10_RECORD != 0:
            raise DataError(
                f"{path}: length {len(raw)} is not a positive multiple of "
                f"{CIFAR10_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
        lab = rec[:, 0]
        if lab.max() >= 10:
            raise DataError(
                f"{path}: label {int(lab.max())} out of range [0, 10)")
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(images).astype(np.float32) / 255.0
    y = np.concatenate(labels)
    mean = np.asarray(CIFAR10_MEAN, np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR10_STD, np.float32).reshape(1, 3, 1, 1)
    x = (x - mean) / std
    ds = Dataset(np.ascontiguousarray(x), y, split)
    if fraction < 1.0:
        ds = subset_per_class(ds, fraction, seed)
    return ds


def subset_per_class(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform per-class subsample keeping floor(fraction * class count)
    samples of each class, in original order."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        take = int(fraction * idx.size)
        if take == 0:
            raise DataError(
                f"fraction {fraction} keeps no samples of class {int(c)}")
        keep.append(rng.choice(idx, size=take, replace=False))
    order = np.sort(np.concatenate(keep))
    return Dataset(ds.images[order], ds.labels[order], ds.split)
