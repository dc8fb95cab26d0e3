"""Synthetic datasets and tiny on-disk fixtures.

Everything here is deterministic in its seed, so the whole test suite
runs without downloading anything. The synthetic image task is shaped
like the MNIST family (10 classes, 28x28, single channel): smooth class
prototypes under amplitude jitter and per-pixel noise. The default
noise level is a deliberate balance: high enough that a 512-unit MLP
can also memorize deliberately mislabeled copies of the test images
(per-sample noise makes every image individually distinguishable), low
enough that clean training generalizes well and can overwrite that
memorization when restarted from such a point.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .data import LabeledDataset

MNIST_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _class_prototypes(rng: np.random.Generator, k: int, hw: int) -> np.ndarray:
    """Smooth per-class patterns: a handful of signed Gaussian bumps."""
    yy, xx = np.mgrid[0:hw, 0:hw]
    protos = np.zeros((k, hw, hw))
    for c in range(k):
        for _ in range(6):
            cy, cx = rng.uniform(hw * 0.15, hw * 0.85, size=2)
            sigma = rng.uniform(hw * 0.07, hw * 0.18)
            sign = rng.choice([-1.0, 1.0])
            protos[c] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        lo, hi = protos[c].min(), protos[c].max()
        protos[c] = (protos[c] - lo) / (hi - lo)
    return protos


def synth_images(n_train: int, n_test: int, *, k: int = 10, hw: int = 28,
                 data_seed: int = 0, noise: float = 0.25, max_shift: int = 0,
                 offset: float = 0.25) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic 10-class image task at MNIST-family geometry.

    `offset` darkens the background before clipping, giving the sparse
    pixel statistics typical of handwritten-digit data.
    """
    rng = np.random.default_rng((data_seed, 404))
    protos = _class_prototypes(rng, k, hw)

    def draw(n, tag):
        labels = rng.integers(0, k, size=n)
        images = np.empty((n, 1, hw, hw))
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        amps = rng.uniform(0.6, 1.0, size=n)
        pixel_noise = rng.normal(0.0, noise, size=(n, hw, hw))
        for i in range(n):
            img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1))
            images[i, 0] = np.clip(amps[i] * img + pixel_noise[i] - offset, 0.0, 1.0)
        return LabeledDataset(images, labels, k, f"synth-{tag}")

    return draw(n_train, "train"), draw(n_test, "test")


def synth_blobs(n: int, *, k: int = 2, dim: int = 32, seed: int = 0,
                spread: float = 0.12, name: str = "blobs") -> LabeledDataset:
    """Gaussian clusters as (n, 1, 1, dim) images; easy to memorize."""
    rng = np.random.default_rng((seed, 505))
    centers = rng.uniform(0.0, 1.0, size=(k, dim))
    labels = rng.integers(0, k, size=n)
    images = np.clip(centers[labels] + rng.normal(0.0, spread, size=(n, dim)), 0.0, 1.0)
    return LabeledDataset(images.reshape(n, 1, 1, dim), labels, k, name)


def _write(path: Path, payload: bytes, compress: bool) -> Path:
    if compress:
        path = path.with_name(path.name + ".gz")
        # fixed mtime keeps gzip output byte-reproducible
        path.write_bytes(gzip.compress(payload, mtime=0))
    else:
        path.write_bytes(payload)
    return path


def write_idx_images(path, images_u8: np.ndarray, compress: bool = False) -> Path:
    """Write (N, rows, cols) uint8 images as an IDX file."""
    n, rows, cols = images_u8.shape
    payload = struct.pack(">IIII", 2051, n, rows, cols) + images_u8.astype(np.uint8).tobytes()
    return _write(Path(path), payload, compress)


def write_idx_labels(path, labels, compress: bool = False) -> Path:
    labels = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", 2049, len(labels)) + labels.tobytes()
    return _write(Path(path), payload, compress)


def write_mnist_fixture(dir_path, n_train: int = 64, n_test: int = 16,
                        seed: int = 0, compress: bool = False) -> dict[str, Path]:
    """Write a tiny random IDX train/test pair using the standard file names."""
    base = Path(dir_path)
    base.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((seed, 606))
    paths = {}
    for split, n in (("train", n_train), ("test", n_test)):
        images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=n, dtype=np.uint8)
        paths[f"{split}_images"] = write_idx_images(base / MNIST_NAMES[f"{split}_images"], images, compress)
        paths[f"{split}_labels"] = write_idx_labels(base / MNIST_NAMES[f"{split}_labels"], labels, compress)
    return paths


def write_cifar10_fixture(dir_path, n_per_batch: int = 4, n_test: int = 4,
                          seed: int = 0) -> Path:
    """Write tiny data_batch_1..5.bin and test_batch.bin files."""
    base = Path(dir_path)
    base.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((seed, 707))

    def record_block(n):
        labels = rng.integers(0, 10, size=(n, 1), dtype=np.uint8)
        pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        return np.concatenate([labels, pixels], axis=1).tobytes()

    for i in range(1, 6):
        (base / f"data_batch_{i}.bin").write_bytes(record_block(n_per_batch))
    (base / "test_batch.bin").write_bytes(record_block(n_test))
    return base
