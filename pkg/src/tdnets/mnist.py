"""IDX (MNIST) file reading and writing.

File layout, all integers big-endian::

    images: 0x00000803, N, rows, cols, then N*rows*cols unsigned bytes
    labels: 0x00000801, N, then N unsigned bytes

Paths ending in ``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DataError, DimensionMismatch, TruncatedFile

__all__ = ["Dataset", "load_mnist_idx", "write_idx_images", "write_idx_labels", "find_mnist_files"]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, 28, 28], float64 in [0, 1]
    labels: np.ndarray  # [N], int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int, seed: int | None = None) -> "Dataset":
        """First ``n`` samples, or a seeded random ``n`` if ``seed`` is given."""
        if seed is None:
            idx = np.arange(min(n, len(self)))
        else:
            from .formats import make_rng

            idx = np.sort(make_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.images[:n_first], self.labels[:n_first]),
                Dataset(self.images[n_first:], self.labels[n_first:]))


def _read(path) -> bytes:
    try:
        if str(path).endswith(".gz"):
            with gzip.open(path, "rb") as fh:
                return fh.read()
        with open(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _parse(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) >= 4 and struct.unpack(">I", raw[:4])[0] != magic:
        raise BadMagic(f"{path}: magic 0x{struct.unpack('>I', raw[:4])[0]:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFile(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = _parse(_read(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse(_read(labels_path), LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if images.shape[1:] != (28, 28):
        raise DimensionMismatch(f"expected 28x28 images, got {images.shape[1]}x{images.shape[2]}")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray) -> None:
    """``images``: uint8 array ``[N, rows, cols]``."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">2I", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


_STEMS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist_files(directory, split: str) -> tuple[str, str]:
    """Locate the canonical file pair for ``split`` in ``directory`` (plain or .gz)."""
    found = []
    for stem in _STEMS[split]:
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            p = os.path.join(directory, name)
            if os.path.exists(p):
                found.append(p)
                break
        else:
            raise DataError(f"no {stem}[.gz] in {directory}")
    return found[0], found[1]
