"""Fixture dataset writers: IDX files and CIFAR-10 binary batches.

``write_digits_idx`` renders a deterministic digit-classification set with
PIL (random shifts and mild noise over font-rendered glyphs) and writes it
in genuine IDX format, so tests exercise the same loader path as real
MNIST. Used when no real MNIST directory is available.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont


def write_idx_images(path, images: np.ndarray):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.size))
        f.write(labels.tobytes())


_FONT_SIZES = (15, 18, 21)


def render_digits(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """n grayscale 28x28 digit images with shifts, scale and noise."""
    rng = np.random.default_rng(seed)
    fonts = [ImageFont.load_default(size=s) for s in _FONT_SIZES]
    images = np.zeros((n, 28, 28), np.uint8)
    labels = rng.integers(0, 10, size=n)
    for i in range(n):
        digit = int(labels[i])
        img = Image.new("L", (28, 28), 0)
        draw = ImageDraw.Draw(img)
        font = fonts[int(rng.integers(0, len(fonts)))]
        dx = int(rng.integers(-3, 4))
        dy = int(rng.integers(-3, 4))
        draw.text((9 + dx, 4 + dy), str(digit), fill=255, font=font)
        arr = np.asarray(img, np.float32)
        arr += rng.normal(0, 12, arr.shape)
        images[i] = np.clip(arr, 0, 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_digits_idx(directory, n_train: int, n_test: int, seed: int = 0):
    """Write an MNIST-layout directory of rendered digits."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imgs, labs = render_digits(n_train + n_test, seed)
    write_idx_images(d / "train-images-idx3-ubyte", imgs[:n_train])
    write_idx_labels(d / "train-labels-idx1-ubyte", labs[:n_train])
    write_idx_images(d / "t10k-images-idx3-ubyte", imgs[n_train:])
    write_idx_labels(d / "t10k-labels-idx1-ubyte", labs[n_train:])
    return d


def write_cifar_batch(path, labels, pixels=None, seed: int = 0):
    """One CIFAR-10 binary batch; random pixels unless given."""
    labels = np.asarray(labels, np.uint8)
    n = labels.size
    if pixels is None:
        rng = np.random.default_rng(seed)
        pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    rec = np.empty((n, 3073), np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = pixels
    Path(path).write_bytes(rec.tobytes())
