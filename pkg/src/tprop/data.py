"""Dataset loading (IDX, CIFAR-10 binary), augmentation, batching and
synthetic fixtures.

Images are stored as ``N x C x H x W`` float arrays standardised per channel
with statistics from the training split.
"""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
DATASETS = ("mnist", "fmnist", "cifar10", "synthetic")


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, images: np.ndarray) -> "ChannelStats":
        axes = (0,) + tuple(range(2, images.ndim))
        mean = images.mean(axis=axes, dtype=np.float64)
        std = images.std(axis=axes, dtype=np.float64)
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, images: np.ndarray, dtype=np.float32) -> np.ndarray:
        shape = (1, -1) + (1,) * (images.ndim - 2)
        out = (images - self.mean.reshape(shape)) / self.std.reshape(shape)
        return out.astype(dtype)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    stats: Optional[ChannelStats] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, count: Optional[int]) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.classes, self.stats)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise DataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex(' ')} (expected {magic:08x})")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = math.prod(dims)
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, stats: Optional[ChannelStats] = None, classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    Pixels are scaled to ``[0, 1]`` and standardised with ``stats``, or with
    statistics of these images when ``stats`` is ``None`` (training split).
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, labels_path)
    if len(images) != len(labels):
        raise DataError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    scaled = images[:, None].astype(np.float64) / 255.0
    stats = ChannelStats.of(scaled) if stats is None else stats
    return Dataset(stats.apply(scaled), labels.astype(np.int64), classes, stats)


def read_cifar10_records(path) -> tuple[np.ndarray, np.ndarray]:
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE), labels


def load_cifar10_binary(files: Sequence, stats: Optional[ChannelStats] = None) -> Dataset:
    """Concatenate CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record)."""
    parts = [read_cifar10_records(f) for f in files]
    images = np.concatenate([p[0] for p in parts]).astype(np.float64) / 255.0
    labels = np.concatenate([p[1] for p in parts])
    stats = ChannelStats.of(images) if stats is None else stats
    return Dataset(stats.apply(images), labels, 10, stats)


def data_root(dataset: str, root: Optional[str] = None) -> Path:
    """``root`` if given, else ``$TPROP_DATA_DIR/<dataset>``."""
    if root:
        return Path(root)
    base = os.environ.get("TPROP_DATA_DIR")
    if not base:
        raise DataError(f"no data root for {dataset!r}: set data.root or TPROP_DATA_DIR")
    return Path(base) / dataset


def load_dataset(dataset: str, root: Optional[str] = None) -> tuple[Dataset, Dataset]:
    """Train and test splits; the test split reuses the training statistics."""
    if dataset not in ("mnist", "fmnist", "cifar10"):
        raise DataError(f"unknown dataset {dataset!r}")
    base = data_root(dataset, root)
    if not base.is_dir():
        raise DataError(f"dataset directory not found: {base}")
    if dataset == "cifar10":
        if (base / "cifar-10-batches-bin").is_dir():
            base = base / "cifar-10-batches-bin"
        train = load_cifar10_binary([base / f for f in CIFAR_FILES["train"]])
        return train, load_cifar10_binary([base / f for f in CIFAR_FILES["test"]], train.stats)
    train = load_idx(*(base / f for f in MNIST_FILES["train"]))
    return train, load_idx(*(base / f for f in MNIST_FILES["test"]), stats=train.stats)


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------

def flip_and_crop(images: np.ndarray, flips: np.ndarray, offsets: np.ndarray, pad: int) -> np.ndarray:
    """Mirror the flagged images horizontally, zero-pad by ``pad`` and crop
    back to the original size at ``offsets`` (row, column) into the padded image."""
    out = np.where(flips[:, None, None, None], images[..., ::-1], images)
    if pad == 0:
        return np.ascontiguousarray(out)
    h, w = images.shape[2:]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    crops = np.empty_like(images)
    for i, (r, c) in enumerate(offsets):
        crops[i] = padded[i, :, r:r + h, c:c + w]
    return crops


def augment(images: np.ndarray, rng: np.random.Generator, flip_p: float = 0.5, crop_pad: int = 4) -> np.ndarray:
    """Random horizontal flip then random crop from a zero-padded copy."""
    n = len(images)
    flips = rng.random(n) < flip_p
    offsets = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
    return flip_and_crop(images, flips, offsets, crop_pad)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def iterate_batches(data: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
                    shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in a seeded per-epoch order; the last batch may be short."""
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, 2, epoch]).permutation(len(data)) if shuffle else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthetic_classification(n: int, dim: int, classes: int, seed: int = 0, separation: float = 4.0,
                             shape: Optional[tuple[int, ...]] = None, dtype=np.float32) -> Dataset:
    """Gaussian blobs with unit covariance around ``separation * e_c``.

    ``shape`` reshapes each ``dim``-vector into an image shape.
    """
    if n < 1:
        raise DataError("synthetic dataset needs n >= 1")
    if classes < 2 or classes > dim:
        raise DataError(f"need 2 <= classes <= dim, got classes={classes}, dim={dim}")
    rng = np.random.default_rng([seed, 3])
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    means = separation * np.eye(classes, dim)
    x = (means[labels] + rng.standard_normal((n, dim))).astype(dtype)
    if shape is not None:
        if math.prod(shape) != dim:
            raise DataError(f"shape {shape} does not hold {dim} values")
        x = x.reshape(n, *shape)
    return Dataset(x, labels, classes)
