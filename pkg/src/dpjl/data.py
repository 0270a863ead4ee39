"""Datasets: IDX and CSV ingestion plus seeded synthetic generators."""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from pathlib import Path

import numpy as np

from dpjl.rng import derive_stream

__all__ = ["Dataset", "load_idx", "load_csv", "gen_synthetic", "SYNTHETIC_KINDS", "DataError"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("classification-gaussians", "sequence-parity")
PAD_ID = 0


class DataError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Samples ``x`` with integer labels ``y``; the first ``n_train`` rows are the training split.

    Token datasets hold integer ids padded (at the front) with id 0 to a
    common length.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    n_train: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise DataError(f"{self.x.shape[0]} samples but {self.y.shape[0]} labels")
        if not 0 <= self.n_train <= self.x.shape[0]:
            raise DataError("n_train out of range")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"label ids must lie in [0, {self.num_classes})")

    @property
    def is_tokens(self) -> bool:
        return np.issubdtype(self.x.dtype, np.integer)

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[:self.n_train], self.y[:self.n_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.n_train:], self.y[self.n_train:]

    @property
    def n_test(self) -> int:
        return self.x.shape[0] - self.n_train

    def with_test(self, other: "Dataset") -> "Dataset":
        """This dataset as the training split and ``other`` as the test split."""
        if self.x.shape[1:] != other.x.shape[1:]:
            raise DataError("train and test samples have different shapes")
        return Dataset(np.concatenate([self.x[:self.n_train], other.x]),
                       np.concatenate([self.y[:self.n_train], other.y]),
                       max(self.num_classes, other.num_classes), self.n_train)

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "Dataset":
        ntr = self.n_train if n_train is None else min(n_train, self.n_train)
        nte = self.n_test if n_test is None else min(n_test, self.n_test)
        idx = np.concatenate([np.arange(ntr), self.n_train + np.arange(nte)])
        return Dataset(self.x[idx], self.y[idx], self.num_classes, ntr)


def _read_idx(path: Path, magic: int, n_dims: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header: expected at least {header} bytes, got {len(raw)}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{n_dims}I", raw[4:header])
    expected = header + math.prod(dims)
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DataError(f"{path}: {kind} IDX file: expected {expected} bytes, got {len(raw)}")
    return dims, raw[header:]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """IDX images (magic 0x803, uint8, scaled to [0, 1]) with IDX labels (magic 0x801)."""
    (n, rows, cols), pixels = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if n != n_labels:
        raise DataError(f"count mismatch: {n} images but {n_labels} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if n else 1)
    return Dataset(x, y, k, n)


def load_csv(path, label_column: str = "label", feature_columns: list[str] | None = None,
             num_classes: int | None = None) -> Dataset:
    """Dense real features and an integer label column from a CSV file with a header row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        if label_column not in header:
            raise DataError(f"{path}: unknown label column {label_column!r}; columns are {header}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise DataError(f"{path}: unknown feature columns {missing}")
        f_idx = [header.index(c) for c in feature_columns]
        l_idx = header.index(label_column)
        xs, ys = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            vals = []
            for j in f_idx + [l_idx]:
                cell = row[j].strip()
                if cell == "":
                    raise DataError(f"{path}: missing value at row {row_no}, column {header[j]!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric value {cell!r} at row {row_no}, "
                                    f"column {header[j]!r}") from None
            label = vals.pop()
            if not math.isfinite(label) or label != int(label) or label < 0:
                raise DataError(f"{path}: label {row[l_idx].strip()!r} at row {row_no} is not a "
                                "nonnegative integer")
            xs.append(vals)
            ys.append(int(label))
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), len(f_idx))
    y = np.asarray(ys, dtype=np.int64)
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if y.size else 1)
    return Dataset(x, y, k, len(ys))


def _gaussians(n: int, rng, num_classes: int = 2, dim: int = 10, margin: float = 4.0) -> tuple:
    if num_classes < 2 or dim < 1 or not margin >= 0:
        raise DataError("classification-gaussians needs num_classes >= 2, dim >= 1, margin >= 0")
    if num_classes <= dim:
        # orthogonal means, pairwise distance = margin
        means = np.eye(num_classes, dim) * (margin / math.sqrt(2.0))
    else:
        dirs = rng.standard_normal(num_classes * dim).reshape(num_classes, dim)
        means = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * (margin / math.sqrt(2.0))
    y = rng.randbelow_many(np.full(n, num_classes))
    x = means[y] + rng.standard_normal(n * dim).reshape(n, dim)
    return x, y, num_classes


def _parity(n: int, rng, length: int = 8, vocab: int = 4, marked: int = 1,
            min_length: int | None = None) -> tuple:
    if length < 1 or vocab < 3 or not 1 <= marked < vocab:
        raise DataError("sequence-parity needs length >= 1, vocab >= 3 and 1 <= marked < vocab")
    min_length = length if min_length is None else int(min_length)
    if not 1 <= min_length <= length:
        raise DataError("min_length must lie in [1, length]")
    tokens = 1 + rng.randbelow_many(np.full(n * length, vocab - 1)).reshape(n, length)
    if min_length < length:
        lengths = min_length + rng.randbelow_many(np.full(n, length - min_length + 1))
        pad = np.arange(length)[None, :] < (length - lengths)[:, None]
        tokens[pad] = PAD_ID
    y = (np.count_nonzero(tokens == marked, axis=1) % 2).astype(np.int64)
    return tokens.astype(np.int64), y, 2


def gen_synthetic(kind: str, n: int, seed: int, params: dict | None = None,
                  test_fraction: float = 0.2) -> Dataset:
    """Seeded synthetic data; the last ``round(test_fraction * n)`` samples form the test split.

    * ``classification-gaussians``: ``num_classes`` unit-variance blobs in
      R^dim whose means are ``margin`` apart.
    * ``sequence-parity``: tokens in [1, vocab) front-padded with 0; the label
      is the parity of the number of ``marked`` tokens.
    """
    if n < 2:
        raise DataError("n must be >= 2")
    if not 0.0 <= test_fraction < 1.0:
        raise DataError("test_fraction must lie in [0, 1)")
    params = dict(params or {})
    rng = derive_stream(seed, f"data/{kind}")
    try:
        if kind == "classification-gaussians":
            x, y, k = _gaussians(n, rng, **params)
        elif kind == "sequence-parity":
            x, y, k = _parity(n, rng, **params)
        else:
            raise DataError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    except TypeError as err:
        raise DataError(f"invalid parameters for {kind}: {err}") from None
    n_test = int(round(test_fraction * n))
    return Dataset(x, y.astype(np.int64), k, n - n_test)
