"""MNIST / Fashion-MNIST (IDX) and CIFAR-10 (binary batch) loaders.

Expected layout under a data directory::

    mnist/    train-images-idx3-ubyte  train-labels-idx1-ubyte
              t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte
    fashion/  same file names as mnist/
    cifar10/  data_batch_1.bin ... data_batch_5.bin  test_batch.bin
              (a nested cifar-10-batches-bin/ directory also works)

IDX files may also be gzip-compressed with a ``.gz`` suffix.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{what}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataFormatError(f"{what}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if imgs.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    images = (imgs.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), split)


def load_cifar10(batch_files, split: str = "train") -> Dataset:
    imgs, labels = [], []
    for f in batch_files:
        raw = _read_bytes(Path(f))
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{f}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        imgs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(imgs).astype(np.float32) / 255.0
    lab = np.concatenate(labels)
    if lab.size and lab.max() >= 10:
        raise DataFormatError(f"label {int(lab.max())} out of range for CIFAR-10")
    return Dataset(images, lab, split)


def load_dataset(data_dir, name: str, split: str) -> Dataset:
    """Load ``name`` in {mnist, fashion, cifar10} from the standard layout."""
    root = Path(data_dir)
    if name in ("mnist", "fashion"):
        prefix = "train" if split == "train" else "t10k"
        d = root / name
        return load_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte", split)
    if name == "cifar10":
        d = root / "cifar10"
        if (d / "cifar-10-batches-bin").is_dir():
            d = d / "cifar-10-batches-bin"
        files = [d / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else [d / "test_batch.bin"]
        return load_cifar10(files, split)
    raise ValueError(f"unknown dataset {name!r}")


def input_shape(name: str) -> tuple:
    return (3, 32, 32) if name == "cifar10" else (1, 28, 28)


def batches(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)``; the last batch may be short."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
