"""
ssbnn Datasets
==============

Labelled image datasets read from IDX containers (plain or gzip), a small
synthetic generator, and deterministic epoch-wise minibatching.

IDX layout (big-endian)::

    offset  type     value
    0       u32      0x00000803 images / 0x00000801 labels
    4       u32      item count
    8       u32      rows     (images only)
    12      u32      columns  (images only)
    16/8    u8[]     pixels (row-major) or labels
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from ..errors import (CountMismatchError, DataError, InvalidParameterError, TruncatedFileError,
                      WrongMagicError)
from ..rng import make_stream

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
PROVENANCES = ("mnist", "fmnist", "synthetic", "custom")
DATA_DIR_ENV = "SSBNN_DATA_DIR"

STANDARD_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = "custom"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown dataset provenance {self.provenance!r}")
        if self.features.ndim != 2 or len(self.features) < 1:
            raise DataError("features must be a non-empty n x d matrix")
        if len(self.labels) != len(self.features):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if np.any(self.features < 0.0) or np.any(self.features > 1.0):
            raise DataError("feature values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in 0..{self.class_count - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.class_count, self.provenance)

    def head(self, n: int) -> "LabeledDataset":
        return self.take(np.arange(min(n, len(self))))


def _read_bytes(path: Union[str, Path]) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise TruncatedFileError(f"corrupt gzip stream: {e}", str(path), len(raw))
    return raw


def _header(data: bytes, path: str, fields: int, magic: int, kind: str):
    size = 4 * fields
    if len(data) < size:
        raise TruncatedFileError(f"{kind} header needs {size} bytes", path, len(data))
    values = struct.unpack_from(f">{fields}I", data, 0)
    if values[0] != magic:
        raise WrongMagicError(f"wrong magic 0x{values[0]:08x} for {kind} (expected 0x{magic:08x})", path, 0)
    return values[1:]


def _payload(data: bytes, path: str, start: int, length: int) -> np.ndarray:
    end = start + length
    if len(data) < end:
        raise TruncatedFileError(f"payload needs {length} bytes from offset {start}", path, len(data))
    if len(data) > end:
        raise CountMismatchError(f"{len(data) - end} trailing bytes after the declared items", path, end)
    return np.frombuffer(data, dtype=np.uint8, count=length, offset=start)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path], provenance: str = "custom",
             class_count: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair; pixels become ``byte / 255`` flattened row-major."""
    images_path, labels_path = str(images_path), str(labels_path)
    image_data = _read_bytes(images_path)
    count, rows, cols = _header(image_data, images_path, 4, IMAGES_MAGIC, "images")
    pixels = _payload(image_data, images_path, 16, count * rows * cols)

    label_data = _read_bytes(labels_path)
    (label_count,) = _header(label_data, labels_path, 2, LABELS_MAGIC, "labels")
    if label_count != count:
        raise CountMismatchError(f"{label_count} labels for {count} images", labels_path, 4)
    labels = _payload(label_data, labels_path, 8, label_count)
    if label_count and labels.max() >= class_count:
        offset = 8 + int(np.argmax(labels >= class_count))
        raise DataError(f"{labels_path}: label {labels.max()} outside 0..{class_count - 1} at offset {offset}")

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    logger.info(f"Loaded {count} images of {rows}x{cols} from {images_path}")
    return LabeledDataset(features, labels.astype(np.int64), class_count, provenance)


def _standard_path(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"dataset file {name} not found in {directory}")


def load_standard(name: str, split: str = "train", root: Optional[Union[str, Path]] = None) -> LabeledDataset:
    """Load ``mnist`` or ``fmnist`` from ``<root>/<name>/`` (root defaults to ``$SSBNN_DATA_DIR``)."""
    if name not in ("mnist", "fmnist"):
        raise InvalidParameterError(f"unknown standard dataset {name!r}")
    if split not in STANDARD_FILES:
        raise InvalidParameterError(f"unknown split {split!r}")
    root = root or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise DataError(f"no dataset root given and {DATA_DIR_ENV} is not set")
    directory = Path(root) / name
    images, labels = STANDARD_FILES[split]
    return load_idx(_standard_path(directory, images), _standard_path(directory, labels), provenance=name)


def synthetic_blobs(n: int, seed: int, dim: int = 2, classes: int = 2, spread: float = 0.08) -> LabeledDataset:
    """Well separated Gaussian blobs inside the unit cube, one per class."""
    if n < 1 or classes < 2 or dim < 1:
        raise InvalidParameterError("synthetic blobs need n >= 1, dim >= 1 and at least two classes")
    rng = make_stream(seed, "synthetic")
    centres = np.linspace(0.2, 0.8, classes)
    labels = np.arange(n) % classes
    features = centres[labels][:, None] + spread * rng.standard_normal((n, dim))
    return LabeledDataset(np.clip(features, 0.0, 1.0), labels, classes, "synthetic")


def batches(n_or_dataset, N: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Index batches of one epoch: a permutation seeded by ``(seed, epoch)`` cut into pieces of ``N``.

    The last batch holds the remainder.
    """
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    if not 1 <= N <= n:
        raise InvalidParameterError(f"batch size must lie in 1..{n}, got {N}")
    order = make_stream(seed, f"epoch-{epoch}").permutation(n)
    return [order[start:start + N] for start in range(0, n, N)]
