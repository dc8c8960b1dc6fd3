"""IDX reader for MNIST-style image and label files (raw or gzip-compressed)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _open(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Read one IDX file into a uint8 array shaped by its header."""
    path = Path(path)
    try:
        with _open(path) as fh:
            header = fh.read(4)
            if len(header) < 4:
                raise IdxFormatError(f"{path}: truncated header")
            (magic,) = struct.unpack(">I", header)
            if expected_magic is not None and magic != expected_magic:
                raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
            if magic >> 8 != 0x08:
                raise IdxFormatError(f"{path}: only unsigned-byte IDX data is supported")
            ndim = magic & 0xFF
            dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
            data = fh.read()
    except (OSError, EOFError, struct.error) as exc:
        raise IdxFormatError(f"{path}: {exc}") from exc
    count = int(np.prod(dims))
    if len(data) != count:
        raise IdxFormatError(f"{path}: expected {count} bytes of data, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def load_mnist(root, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as float64 (n, 28, 28) and integer labels."""
    root = Path(root)
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}[split]
    images = read_idx(_find(root, f"{prefix}-images-idx3-ubyte"), IMAGE_MAGIC)
    labels = read_idx(_find(root, f"{prefix}-labels-idx1-ubyte"), LABEL_MAGIC)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IdxFormatError(f"{root}: image/label files disagree")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)
