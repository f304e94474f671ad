"""MNIST (IDX) and CIFAR-10 (binary version) loaders, plus minibatch sampling."""

from __future__ import annotations

import enum
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
NUM_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

MNIST_ENV = "SNAPENS_MNIST_DIR"
CIFAR10_ENV = "SNAPENS_CIFAR10_DIR"


class DataFormatError(ValueError):
    """Raised when a dataset file does not match its documented layout."""


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 (N, C, H, W) in [0, 1]
    labels: np.ndarray  # int64 (N,)
    split: Split

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        """The first ``n`` samples (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _read_bytes(path: str | os.PathLike) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        raw = fh.read()
    return gzip.decompress(raw) if head == b"\x1f\x8b" else raw


def parse_idx_images(raw: bytes, name: str = "images") -> np.ndarray:
    """Decode an IDX3 ubyte image file to float32 (N, 1, rows, cols) in [0, 1]."""
    if len(raw) < 16:
        raise DataFormatError(f"{name}: file too short for an IDX3 header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{name}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    if len(raw) - 16 != count * rows * cols:
        raise DataFormatError(f"{name}: count {count} x {rows}x{cols} does not match payload of {len(raw) - 16} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    return pixels.astype(np.float32) / np.float32(255)


def parse_idx_labels(raw: bytes, name: str = "labels") -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{name}: file too short for an IDX1 header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{name}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(raw) - 8 != count:
        raise DataFormatError(f"{name}: count {count} does not match payload of {len(raw) - 8} bytes")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DataFormatError(f"{name}: label {labels.max()} out of range [0, {NUM_CLASSES})")
    return labels


def read_idx_images(path: str | os.PathLike) -> np.ndarray:
    return parse_idx_images(_read_bytes(path), Path(path).name)


def read_idx_labels(path: str | os.PathLike) -> np.ndarray:
    return parse_idx_labels(_read_bytes(path), Path(path).name)


def load_mnist(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Load ``(train, test)`` from the four standard IDX files (optionally ``.gz``)."""
    directory = Path(directory)
    out = []
    for split in (Split.TRAIN, Split.TEST):
        img_name, lbl_name = MNIST_FILES[split.value]
        images = read_idx_images(directory / img_name)
        labels = read_idx_labels(directory / lbl_name)
        if images.shape[1:] != (1, 28, 28):
            raise DataFormatError(f"{img_name}: dims {images.shape[2:]} are not 28x28")
        if len(images) != len(labels):
            raise DataFormatError(f"{split.value}: {len(images)} images but {len(labels)} labels")
        out.append(Dataset(images, labels, split))
    return out[0], out[1]


def parse_cifar_batch(raw: bytes, name: str = "batch") -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records: one label byte, then 3072 channel-major pixels."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{name}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        raise DataFormatError(f"{name}: label {labels.max()} out of range [0, {NUM_CLASSES})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    return parse_cifar_batch(_read_bytes(path), Path(path).name)


def load_cifar10(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Load ``(train, test)`` from the binary-version batch files."""
    directory = Path(directory)
    if not (directory / CIFAR_TRAIN_FILES[0]).exists() and (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    parts = [read_cifar_batch(directory / f) for f in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), Split.TRAIN)
    test_images, test_labels = read_cifar_batch(directory / CIFAR_TEST_FILE)
    return train, Dataset(test_images, test_labels, Split.TEST)


def load_dataset(name: str, directory: str | os.PathLike | None = None) -> tuple[Dataset, Dataset]:
    """Load ``"mnist"`` or ``"cifar10"``; the directory defaults to the env var."""
    name = name.lower().replace("-", "")
    env = {"mnist": MNIST_ENV, "cifar10": CIFAR10_ENV}.get(name)
    if env is None:
        raise ValueError(f"unknown dataset {name!r}; expected mnist or cifar10")
    directory = directory or os.environ.get(env)
    if not directory:
        raise FileNotFoundError(f"no data directory given for {name} (set ${env} or pass --data-dir)")
    return load_mnist(directory) if name == "mnist" else load_cifar10(directory)


class Sampling(enum.Enum):
    SHUFFLE_EPOCH = "SHUFFLE_EPOCH"
    BOOTSTRAP = "BOOTSTRAP"

    @classmethod
    def parse(cls, value: "str | Sampling") -> "Sampling":
        return value if isinstance(value, cls) else cls(str(value).upper().replace("-", "_"))


class Batcher:
    """Seeded minibatch index stream over a dataset of ``n`` samples.

    ``SHUFFLE_EPOCH`` partitions a fresh permutation per epoch into batches,
    keeping a final short batch. ``BOOTSTRAP`` draws every batch with
    replacement; an "epoch" is then ``ceil(n / batch_size)`` such draws.
    """

    def __init__(self, batch_size: int, mode: Sampling = Sampling.SHUFFLE_EPOCH, seed: int = 0):
        if batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {batch_size}")
        self.batch_size = batch_size
        self.mode = Sampling.parse(mode)
        self.rng = np.random.default_rng(seed)
        self._pending: list[np.ndarray] = []

    def batches_per_epoch(self, n: int) -> int:
        return -(-n // self.batch_size)

    def epoch(self, n: int) -> Iterator[np.ndarray]:
        """Index arrays for one pass over ``n`` samples."""
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        if self.mode is Sampling.SHUFFLE_EPOCH:
            if self.batch_size > n:
                raise ValueError(f"batch size {self.batch_size} exceeds dataset size {n}")
            perm = self.rng.permutation(n)
            for start in range(0, n, self.batch_size):
                yield perm[start:start + self.batch_size]
        else:
            for _ in range(self.batches_per_epoch(n)):
                yield self.rng.integers(0, n, size=self.batch_size)

    def next_batch(self, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Stateful single-batch interface over :meth:`epoch`."""
        if not self._pending:
            self._pending = list(self.epoch(len(dataset)))[::-1]
        idx = self._pending.pop()
        return dataset.images[idx], dataset.labels[idx]
