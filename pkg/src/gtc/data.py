"""Dataset readers (MNIST IDX, CIFAR-10 binary), synthetic blobs and batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np

from gtc.tensor import SeededRng, Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
MAX_IDX_ELEMENTS = 1 << 32

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetSplit:
    images: Tensor
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images.data) != len(self.labels):
            raise ValueError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: Optional[int], name: Optional[str] = None) -> "DatasetSplit":
        if n is None or n >= len(self):
            return self
        return DatasetSplit(Tensor(self.images.data[:n]), self.labels[:n], name or self.name)


def parse_idx_images(buf: bytes) -> Tensor:
    """IDX3 image file -> N x 1 x rows x cols tensor scaled to [0, 1]."""
    if len(buf) < 16:
        raise DataFormatError("IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x}")
    count = n * rows * cols
    if count >= MAX_IDX_ELEMENTS:
        raise DataFormatError("IDX dimensions overflow")
    if len(buf) - 16 != count:
        raise DataFormatError(f"IDX body has {len(buf) - 16} bytes, header implies {count}")
    pix = np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    return Tensor(pix.astype(np.float32) / np.float32(255.0))


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DataFormatError("IDX label header truncated")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x}")
    if len(buf) - 8 != n:
        raise DataFormatError(f"IDX body has {len(buf) - 8} bytes, header implies {n}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(images) -> bytes:
    """Inverse of :func:`parse_idx_images` for [0, 1] data on the 1/255 grid."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    n, _, rows, cols = arr.shape
    pix = np.rint(arr * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pix.tobytes()


def write_idx_labels(labels) -> bytes:
    lab = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(lab)) + lab.tobytes()


def parse_cifar10_bin(buf: bytes, name: str = "cifar10") -> DatasetSplit:
    """CIFAR-10 binary records: 1 label byte + 3072 channel-major pixels each."""
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"CIFAR-10 length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError("CIFAR-10 label greater than 9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return DatasetSplit(Tensor(images), labels, name)


def _read(path: str) -> bytes:
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def load_mnist(data_dir: str, train_subset: Optional[int] = 10000,
               test_subset: Optional[int] = 2000) -> tuple[DatasetSplit, DatasetSplit]:
    """Read the four standard MNIST IDX files (optionally gzipped) from ``data_dir``."""
    f = {k: os.path.join(data_dir, v) for k, v in MNIST_FILES.items()}
    train = DatasetSplit(parse_idx_images(_read(f["train_images"])),
                         parse_idx_labels(_read(f["train_labels"])), "mnist-train")
    test = DatasetSplit(parse_idx_images(_read(f["test_images"])),
                        parse_idx_labels(_read(f["test_labels"])), "mnist-test")
    return train.subset(train_subset), test.subset(test_subset)


def load_cifar10(data_dir: str, train_subset: Optional[int] = None,
                 test_subset: Optional[int] = None) -> tuple[DatasetSplit, DatasetSplit]:
    parts = [parse_cifar10_bin(_read(os.path.join(data_dir, f"data_batch_{i}.bin"))) for i in range(1, 6)]
    train = DatasetSplit(Tensor(np.concatenate([p.images.data for p in parts])),
                         np.concatenate([p.labels for p in parts]), "cifar10-train")
    test = parse_cifar10_bin(_read(os.path.join(data_dir, "test_batch.bin")), "cifar10-test")
    return train.subset(train_subset), test.subset(test_subset)


def synth_blobs(classes: int, n_per_class: int, dim: int, seed: int = 0, variance: float = 0.01,
                image_shape: Optional[tuple] = None) -> DatasetSplit:
    """Gaussian clusters centred on the vertices of the unit simplex, clipped to [0, 1].

    Class ``c`` is centred on basis vector ``e_(c mod dim)``; requires
    ``dim >= classes`` so the centres are distinct.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < classes:
        raise ValueError("dim must be >= classes")
    rng = SeededRng(seed)
    centers = np.eye(dim, dtype=np.float64)[:classes]
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centers[labels] + rng.normal((len(labels), dim)) * np.sqrt(variance)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    shape = image_shape or (1, 1, dim)
    return DatasetSplit(Tensor(x.reshape((len(labels),) + tuple(shape))), labels, "synth")


@lru_cache(maxsize=4)
def _epoch_perm(n: int, seed: int, epoch: int) -> np.ndarray:
    return SeededRng(seed, stream=(1 << 32) + epoch).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, iteration: int, shuffle: bool = True) -> np.ndarray:
    """Indices of training batch ``iteration``; epochs are seeded permutations, last short batch kept."""
    per_epoch = -(-n // batch_size)
    epoch, j = divmod(iteration, per_epoch)
    order = _epoch_perm(n, seed, epoch) if shuffle else np.arange(n)
    return order[j * batch_size:(j + 1) * batch_size]


def batches(split: DatasetSplit, batch_size: int, seed: int = 0, shuffle: bool = True,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(x, y)`` batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(split)
    per_epoch = -(-n // batch_size)
    x, y = split.images.data, split.labels
    for j in range(per_epoch):
        idx = batch_indices(n, batch_size, seed, epoch * per_epoch + j, shuffle)
        yield x[idx], y[idx]
