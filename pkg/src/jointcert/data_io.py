"""Datasets: MNIST IDX files, deterministic mini-batching and synthetic blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MAX_ITEMS = 1 << 31


@dataclass
class Dataset:
    images: np.ndarray      # (N, C, H, W) or (N, d), values in [0, 1]
    labels: np.ndarray      # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)

    def flatten(self) -> "Dataset":
        return Dataset(self.images.reshape(len(self), -1), self.labels, self.num_classes)


def _parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    if len(data) < 4:
        raise DatasetError("IDX data shorter than its header")
    magic, = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ITEMS:
            raise DatasetError(f"IDX dimensions {dims} overflow")
    if len(data) - header < count:
        raise DatasetError(f"IDX payload truncated: need {count} bytes, have {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Images as float64 in [0, 1] with shape ``(N, rows, cols)``."""
    return _parse_idx(data, IMAGES_MAGIC).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    return _parse_idx(data, LABELS_MAGIC).astype(np.int64)


def encode_idx(array: np.ndarray) -> bytes:
    """Serialize a uint8 array as an IDX blob (inverse of the parsers)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError("IDX encoding expects uint8 data")
    magic = (IDX_UBYTE << 8) | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_idx_pair(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    images = parse_idx_images(read_bytes(images_path))
    labels = parse_idx_labels(read_bytes(labels_path))
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images, labels, num_classes)


def load_mnist(directory: str, split: str = "test", limit: int | None = None) -> Dataset:
    """Load the MNIST ``train`` or ``test`` split from a directory of IDX files."""
    prefix = {"train": "train", "test": "t10k"}[split]
    ds = load_idx_pair(_find(directory, f"{prefix}-images-idx3-ubyte"),
                       _find(directory, f"{prefix}-labels-idx1-ubyte"))
    return ds.subset(limit) if limit else ds


def write_idx_dataset(ds: Dataset, directory: str, prefix: str = "t10k") -> None:
    """Write a dataset as an IDX image/label pair (pixels quantized to bytes)."""
    os.makedirs(directory, exist_ok=True)
    images = ds.images.reshape(len(ds), *ds.images.shape[-2:]) if ds.images.ndim == 4 else ds.images
    if images.ndim == 2:
        images = images[:, None, :]
    pixels = np.round(images * 255).astype(np.uint8)
    with open(os.path.join(directory, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(encode_idx(pixels))
    with open(os.path.join(directory, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(encode_idx(ds.labels.astype(np.uint8)))


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield ``(x, y)`` mini-batches in an order fixed by ``(seed, epoch)``.

    The final batch may be short.
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    n = len(ds)
    if n == 0:
        raise DatasetError("empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def batch_stream(ds: Dataset, batch_size: int, seed: int):
    """Endless sequence of batches over successive epochs."""
    epoch = 0
    while True:
        yield from batches(ds, batch_size, seed, epoch)
        epoch += 1


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def synthetic_blobs(n_per_class: int, d: int, separation: float, seed: int) -> Dataset:
    """Two unit-variance Gaussian clusters at ``+-separation/2`` on the first axis.

    Points are mapped into the unit cube by ``x -> 0.5 + x / (separation + 8)``
    and clipped to [0, 1]. Label 0 is the negative cluster.
    """
    if n_per_class < 1 or d < 1:
        raise DatasetError("need n_per_class >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((2 * n_per_class, d))
    labels = np.repeat(np.arange(2), n_per_class)
    pts[:, 0] += np.where(labels == 0, -separation / 2, separation / 2)
    images = np.clip(0.5 + pts / (separation + 8.0), 0.0, 1.0)
    return Dataset(images, labels, 2)
