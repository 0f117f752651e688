"""Dataset ingestion: IDX (MNIST) and CSV files."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    """Base class for dataset parse errors; messages carry the offending path."""


class BadMagicError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class CellError(DatasetError):
    pass


@dataclass
class DatasetBundle:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray = None
    test_y: np.ndarray = None
    # per-feature (min, max) over the training rows
    ranges: np.ndarray = None
    label_names: list = field(default_factory=list)

    def __post_init__(self):
        self.train_x = np.asarray(self.train_x, dtype=np.float64)
        self.train_y = np.asarray(self.train_y, dtype=np.int64)
        dim = self.train_x.shape[1] if self.train_x.ndim == 2 else 0
        if self.test_x is None:
            self.test_x = np.zeros((0, dim))
            self.test_y = np.zeros(0, dtype=np.int64)
        self.test_x = np.asarray(self.test_x, dtype=np.float64)
        self.test_y = np.asarray(self.test_y, dtype=np.int64)
        if len(self.test_x) and self.test_x.shape[1] != dim:
            raise DatasetError(f"train rows have {dim} features, test rows {self.test_x.shape[1]}")
        if len(self.train_x) != len(self.train_y) or len(self.test_x) != len(self.test_y):
            raise DatasetError("feature and label counts differ")
        if self.ranges is None:
            self.ranges = feature_ranges(self.train_x)
        if not self.label_names:
            top = max([int(self.train_y.max(initial=-1)), int(self.test_y.max(initial=-1))])
            self.label_names = [str(i) for i in range(top + 1)]
        for ys in (self.train_y, self.test_y):
            if len(ys) and (ys.min() < 0 or ys.max() >= len(self.label_names)):
                raise DatasetError(f"labels outside [0, {len(self.label_names)})")

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]

    def with_test(self, other: "DatasetBundle") -> "DatasetBundle":
        """This bundle's training split with ``other``'s training split as test data."""
        names = self.label_names if len(self.label_names) >= len(other.label_names) else other.label_names
        return DatasetBundle(self.train_x, self.train_y, other.train_x, other.train_y, self.ranges, list(names))


def feature_ranges(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or len(x) == 0:
        return np.zeros((x.shape[1] if x.ndim == 2 else 0, 2))
    return np.stack([x.min(axis=0), x.max(axis=0)], axis=1)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _header(raw: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(raw) < need:
        raise TruncatedError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{n_dims}I", raw[4:need])


def read_idx_images(path) -> np.ndarray:
    """Images as ``(count, rows * cols)`` floats in [0, 1]."""
    raw = _read_bytes(path)
    count, rows, cols = _header(raw, path, IMAGES_MAGIC, 3)
    size = count * rows * cols
    body = raw[16:]
    if len(body) < size:
        raise TruncatedError(f"{path}: expected {size} pixel bytes for {count} images, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=size)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _header(raw, path, LABELS_MAGIC, 1)
    body = raw[8:]
    if len(body) < count:
        raise TruncatedError(f"{path}: expected {count} labels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).astype(np.int64)


def load_idx(images_path, labels_path) -> DatasetBundle:
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if len(x) != len(y):
        raise CountMismatchError(f"{images_path} holds {len(x)} images but {labels_path} holds {len(y)} labels")
    return DatasetBundle(x, y, label_names=[str(i) for i in range(max(10, int(y.max(initial=-1)) + 1))])


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray, shape=(28, 28)):
    """Write uint8 images (``(count, rows * cols)``, values 0-255) and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    labels = np.asarray(labels, dtype=np.uint8)
    rows, cols = shape
    if images.shape[1] != rows * cols:
        raise ValueError(f"images have {images.shape[1]} pixels, shape {shape} needs {rows * cols}")
    for path, blob in (
        (images_path, struct.pack(">IIII", IMAGES_MAGIC, len(images), rows, cols) + images.tobytes()),
        (labels_path, struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()),
    ):
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wb") as f:
            f.write(blob)


def load_csv(path, label_column: str) -> DatasetBundle:
    """Numeric CSV with a header row; every column except ``label_column`` is a feature."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DatasetError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise DatasetError(f"{path}: no column named {label_column!r} in header {header}")
    li = header.index(label_column)
    xs, ys = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CellError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        vals = []
        for c, cell in enumerate(row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise CellError(f"{path}: row {r}, column {header[c]!r}: non-numeric cell {cell!r}") from None
        lab = vals.pop(li)
        if lab != int(lab) or lab < 0:
            raise CellError(f"{path}: row {r}, column {label_column!r}: label {lab} is not a non-negative integer")
        xs.append(vals)
        ys.append(int(lab))
    dim = len(header) - 1
    x = np.array(xs, dtype=np.float64).reshape(len(xs), dim)
    return DatasetBundle(x, np.array(ys, dtype=np.int64))
