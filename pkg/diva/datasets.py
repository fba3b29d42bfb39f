"""Dataset ingestion: MNIST-style IDX files, numeric CSV tables and latent dumps."""

from __future__ import annotations

import gzip
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from diva.config import DatasetSource, IncrementalSchedule
from diva.errors import ContractError, ParseError, ShapeError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_IDX_UBYTE = 0x08


# -----------------------------
#  Dataset value
# -----------------------------
@dataclass
class Dataset:
    """Feature rows with optional integer labels and their row indices in the source file."""
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be a 2-D matrix, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).ravel()
            if self.labels.shape[0] != self.features.shape[0]:
                raise ShapeError(
                    f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
                )
        if self.indices is None:
            self.indices = np.arange(self.features.shape[0])

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self):
        if self.labels is None:
            return []
        return [int(c) for c in np.unique(self.labels)]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            features=self.features[rows],
            labels=None if self.labels is None else self.labels[rows],
            indices=self.indices[rows],
        )

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# -----------------------------
#  IDX files
# -----------------------------
def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """
    Parse one big-endian IDX file holding unsigned bytes.

    Returns:
        np.ndarray: uint8 array shaped by the header dimensions.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated IDX header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08X} (expected 0x{expected_magic:08X})")

    n_dims = magic & 0xFF
    header_end = 4 + 4 * n_dims
    if len(raw) < header_end:
        raise ParseError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * n_dims, raw[4:header_end])
    expected = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < expected:
        raise ParseError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        logger.warning("%s: ignoring %d trailing bytes", path, len(payload) - expected)
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def write_idx(path, array) -> Path:
    """Write a uint8 array as an IDX file (gzip-compressed when the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = (_IDX_UBYTE << 8) | array.ndim
    raw = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip.compress(raw) if path.suffix == ".gz" else raw)
    return path


def load_idx(images_path, labels_path=None) -> Dataset:
    """
    Load MNIST-format images (and labels) as flattened rows in [-1, 1].

    Args:
        images_path (str | Path): IDX image tensor, N x rows x cols.
        labels_path (str | Path | None): IDX label vector of length N.

    Returns:
        Dataset: pixel p mapped to 2 * (p / 255) - 1.
    """
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    features = 2.0 * (images.reshape(images.shape[0], -1).astype(float) / 255.0) - 1.0

    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABEL_MAGIC).astype(int)
        if labels.shape[0] != features.shape[0]:
            raise ParseError(
                f"{labels_path}: {labels.shape[0]} labels but {features.shape[0]} images in {images_path}"
            )

    logger.info("Loaded %d IDX images of size %d from %s", features.shape[0], features.shape[1], images_path)
    return Dataset(features=features, labels=labels)


# -----------------------------
#  CSV tables
# -----------------------------
_PANDAS_LINE = re.compile(r"line (\d+)")


def load_csv(path, label_column: Optional[str] = None) -> Dataset:
    """
    Load a rectangular numeric CSV with a header row.

    Features are the non-label columns in header order. Errors cite the
    1-based line number in the file (the header is line 1).
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = _PANDAS_LINE.search(str(e))
        where = f"line {match.group(1)}" if match else "unknown line"
        raise ParseError(f"{path}: ragged row at {where}") from e
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path}: empty CSV file") from e

    missing = df.isna().any(axis=1)
    if missing.any():
        raise ParseError(f"{path}: ragged row at line {int(np.flatnonzero(missing)[0]) + 2}")

    if label_column is not None and label_column not in df.columns:
        raise ParseError(f"{path}: label column '{label_column}' not found")

    numeric = df.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna()
    if bad.any().any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        column = bad.columns[bad.iloc[row].to_numpy()][0]
        raise ParseError(
            f"{path}: non-numeric value {df.iloc[row][column]!r} in column '{column}' at line {row + 2}"
        )

    labels = None
    if label_column is not None:
        values = numeric.pop(label_column).to_numpy(dtype=float)
        if np.any(values != np.round(values)):
            raise ParseError(f"{path}: label column '{label_column}' holds non-integer values")
        labels = values.astype(int)

    logger.info("Loaded %d rows x %d features from %s", len(numeric), numeric.shape[1], path)
    return Dataset(features=numeric.to_numpy(dtype=float), labels=labels)


def load_dataset(source: DatasetSource, max_rows: Optional[int] = None) -> Dataset:
    if source.format == "idx":
        dataset = load_idx(source.path, source.labels_path)
    else:
        dataset = load_csv(source.path, source.label_column)
    return dataset.head(max_rows) if max_rows else dataset


def load_labels(path) -> np.ndarray:
    """Integer labels from a CSV with a `label` column (or a single column)."""
    df = pd.read_csv(path)
    column = "label" if "label" in df.columns else df.columns[0]
    return df[column].to_numpy(dtype=int)


# -----------------------------
#  Class filters
# -----------------------------
def select_classes(dataset: Dataset, classes: Optional[Iterable[int]]) -> Dataset:
    """Rows whose label is in `classes` (all rows when `classes` is None)."""
    if classes is None:
        return dataset
    if dataset.labels is None:
        raise ContractError("class filtering needs labelled data")
    return dataset.subset(np.flatnonzero(np.isin(dataset.labels, list(classes))))


def apply_schedule(dataset: Dataset, schedule: Optional[IncrementalSchedule], epoch: int) -> Dataset:
    """Rows whose label is active at `epoch` under the incremental schedule."""
    if schedule is None:
        return dataset
    if dataset.labels is None:
        raise ContractError("an incremental schedule needs labelled data")
    return select_classes(dataset, schedule.active_classes(epoch))


# -----------------------------
#  Latent dumps
# -----------------------------
def write_latent_dump(path, z, labels=None, clusters=None) -> Path:
    """
    Write latent rows as CSV with header z0..z{D-1},label,cluster.

    Missing labels or clusters are written as -1.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    df = pd.DataFrame(z, columns=[f"z{d}" for d in range(z.shape[1])])
    df["label"] = np.full(n, -1) if labels is None else np.asarray(labels, dtype=int)
    df["cluster"] = np.full(n, -1) if clusters is None else np.asarray(clusters, dtype=int)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def read_latent_dump(path) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Inverse of write_latent_dump; -1 columns come back as None."""
    df = pd.read_csv(path)
    z_cols = [c for c in df.columns if re.fullmatch(r"z\d+", c)]
    if not z_cols or "label" not in df.columns or "cluster" not in df.columns:
        raise ParseError(f"{path}: expected columns z0..z{{D-1}},label,cluster")
    z = df[sorted(z_cols, key=lambda c: int(c[1:]))].to_numpy(dtype=float)
    labels = df["label"].to_numpy(dtype=int)
    clusters = df["cluster"].to_numpy(dtype=int)
    return (
        z,
        None if np.all(labels < 0) else labels,
        None if np.all(clusters < 0) else clusters,
    )
