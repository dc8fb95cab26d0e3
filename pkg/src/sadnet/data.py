"""Dataset ingestion, label corruption, and deterministic batching.

Binary containers:
  IDX      big-endian; magic 0x00000803 (images) / 0x00000801 (labels),
           then the declared dimension sizes as 32-bit integers, then
           raw unsigned bytes.
  CIFAR-10 3073-byte records: one label byte followed by 3072 pixel
           bytes in channel-major R,G,B planes.
Both loaders accept gzip-compressed files (detected by the 0x1f 0x8b
magic). Pixels are scaled by 1/255 into [0, 1]; no standardization.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, ValidationError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) in [0, 1], integer labels in [0, k)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass
class BatchPlan:
    """Deterministic shuffled batching: one permutation per (seed, epoch)."""

    batch_size: int
    seed: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng((self.seed, epoch)).permutation(n)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, magic_want: int, ndim: int):
    head = 4 * (1 + ndim)
    if len(raw) < head:
        raise FormatError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{1 + ndim}I", raw[:head])
    if fields[0] != magic_want:
        raise FormatError(f"{path}: bad IDX magic {fields[0]}, expected {magic_want}")
    return fields[1:], raw[head:]


def load_idx(images_path, labels_path, name: str = "", class_count: int | None = None) -> LabeledDataset:
    """Parse an IDX image/label pair into a dataset shaped (N, 1, rows, cols)."""
    raw = _read_bytes(images_path)
    (n, rows, cols), body = _idx_header(raw, images_path, IDX_IMAGE_MAGIC, 3)
    if len(body) != n * rows * cols:
        raise FormatError(f"{images_path}: expected {n * rows * cols} pixel bytes, found {len(body)}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0

    raw = _read_bytes(labels_path)
    (n_labels,), body = _idx_header(raw, labels_path, IDX_LABEL_MAGIC, 1)
    if len(body) != n_labels:
        raise FormatError(f"{labels_path}: expected {n_labels} label bytes, found {len(body)}")
    if n_labels != n:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)

    k = class_count if class_count is not None else int(labels.max()) + 1 if n else 1
    return LabeledDataset(images, labels, k, name or Path(images_path).stem)


def _load_cifar_file(path):
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32) / 255.0
    return images, labels


def load_cifar10(dir_path) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the 5 train batch files and the test batch from dir_path."""
    base = Path(dir_path)
    if not (base / CIFAR_TEST_FILE).exists() and (base / "cifar-10-batches-bin" / CIFAR_TEST_FILE).exists():
        base = base / "cifar-10-batches-bin"
    parts = [_load_cifar_file(base / fname) for fname in CIFAR_TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in parts])
    train_labels = np.concatenate([p[1] for p in parts])
    test_images, test_labels = _load_cifar_file(base / CIFAR_TEST_FILE)
    train = LabeledDataset(train_images, train_labels, 10, "cifar10-train")
    test = LabeledDataset(test_images, test_labels, 10, "cifar10-test")
    return train, test


def corrupt_labels(ds: LabeledDataset, rng: np.random.Generator) -> LabeledDataset:
    """Replace every label with one drawn uniformly from the k-1 wrong classes.

    The original dataset is untouched; the draw happens once, so the
    corrupted labels are fixed thereafter.
    """
    k = ds.class_count
    if k < 2:
        raise ValidationError(f"corruption needs at least 2 classes, got {k}")
    offsets = rng.integers(1, k, size=len(ds))
    new_labels = (ds.labels + offsets) % k
    return LabeledDataset(ds.images, new_labels, k, f"{ds.name}-corrupted")


def build_corrupted_train(train: LabeledDataset, corrupted_test: LabeledDataset) -> LabeledDataset:
    """Append t = floor(train/test) + 1 verbatim copies of the corrupted test set.

    The clean train set stays as the prefix, so perfect accuracy on the
    result implies perfect accuracy on the original train set.
    """
    if train.class_count != corrupted_test.class_count:
        raise ConsistencyError(
            f"class counts differ: {train.class_count} vs {corrupted_test.class_count}")
    if train.images.shape[1:] != corrupted_test.images.shape[1:]:
        raise ConsistencyError(
            f"image shapes differ: {train.images.shape[1:]} vs {corrupted_test.images.shape[1:]}")
    t = len(train) // len(corrupted_test) + 1
    images = np.concatenate([train.images] + [corrupted_test.images] * t)
    labels = np.concatenate([train.labels] + [corrupted_test.labels] * t)
    return LabeledDataset(images, labels, train.class_count, f"{train.name}+{t}x{corrupted_test.name}")


def subset(ds: LabeledDataset, n: int, rng: np.random.Generator, stratified: bool = False) -> LabeledDataset:
    """Sample n examples without replacement; stratified keeps classes balanced."""
    if n < 1 or n > len(ds):
        raise ValidationError(f"subset size {n} outside [1, {len(ds)}]")
    if not stratified:
        pick = rng.choice(len(ds), size=n, replace=False)
    else:
        k = ds.class_count
        if n < k:
            raise ValidationError(f"stratified subset needs n >= {k} classes, got {n}")
        base, extra = divmod(n, k)
        # classes granted one extra sample are chosen by the rng, keeping it deterministic
        bonus = set(rng.permutation(k)[:extra].tolist())
        picks = []
        for c in range(k):
            idx = np.flatnonzero(ds.labels == c)
            want = base + (1 if c in bonus else 0)
            if want > len(idx):
                raise ValidationError(f"class {c} has only {len(idx)} examples, need {want}")
            picks.append(rng.choice(idx, size=want, replace=False))
        pick = np.concatenate(picks)
        pick = pick[rng.permutation(len(pick))]
    return LabeledDataset(ds.images[pick], ds.labels[pick], ds.class_count, f"{ds.name}-sub{n}")


def batches(ds: LabeledDataset, plan: BatchPlan, epoch: int):
    """Yield (images, labels) batches covering the dataset exactly once.

    Order is the plan's (seed, epoch) permutation; the final short batch
    is included.
    """
    perm = plan.permutation(len(ds), epoch)
    for start in range(0, len(ds), plan.batch_size):
        pick = perm[start:start + plan.batch_size]
        yield ds.images[pick], ds.labels[pick]
