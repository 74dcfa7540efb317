"""Dataset ingestion: IDX and CSV readers, deterministic splits, Z-score normalization."""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class Normalizer:
    """Per-channel Z-score statistics, fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray
    raw_range: tuple = (0.0, 1.0)

    @classmethod
    def fit(cls, x: np.ndarray, raw_range=(0.0, 1.0)) -> Normalizer:
        axes = (0,) + tuple(range(2, x.ndim))
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        if np.any(std == 0):
            raise DataError(f"channel(s) {np.flatnonzero(std == 0).tolist()} are constant; std is zero")
        return cls(mean, std, raw_range)

    def _shape(self, ndim):
        return (-1,) + (1,) * (ndim - 2)

    def apply(self, x: np.ndarray) -> np.ndarray:
        s = self._shape(x.ndim)
        return (x - self.mean.reshape(s)) / self.std.reshape(s)

    def bounds(self, input_shape) -> tuple:
        """Normalized images of the raw pixel range, broadcastable to ``input_shape``."""
        s = (-1,) + (1,) * (len(input_shape) - 1)
        lo = (self.raw_range[0] - self.mean) / self.std
        hi = (self.raw_range[1] - self.mean) / self.std
        return lo.reshape(s), hi.reshape(s)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "raw_range": list(self.raw_range)}


@dataclass
class SplitData:
    train: Dataset
    val: Dataset
    test: Dataset
    normalizer: Normalizer
    classes: int
    digest: str

    @property
    def input_shape(self):
        return self.train.x.shape[1:]

    @property
    def bounds(self):
        return self.normalizer.bounds(self.input_shape)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expect_magic=None) -> np.ndarray:
    """Read an unsigned-byte IDX file (the MNIST container) into an array."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise DataError(f"{path}: magic number 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataError(f"{path}: only unsigned-byte IDX payloads are supported (magic 0x{magic:08x})")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    payload = raw[4 + 4 * ndim :]
    if len(payload) != int(np.prod(dims)):
        raise DataError(f"{path}: payload has {len(payload)} bytes, header promises {int(np.prod(dims))}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header + arr.tobytes())


def load_idx_pair(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return images[:, None, :, :].astype(np.float64) / 255.0, labels.astype(int)


# ---------------------------------------------------------------------------
# CSV: one row per image, label first, then pixel values in [0, 255]
# ---------------------------------------------------------------------------


def load_csv(path, shape=None):
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row:
                continue
            if rows and len(row) != len(rows[0]):
                raise DataError(f"{path}:{lineno}: ragged row ({len(row)} fields, expected {len(rows[0])})")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no rows")
    try:
        arr = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric field") from exc
    labels = arr[:, 0].astype(int)
    pixels = arr[:, 1:] / 255.0
    if shape is None:
        side = int(round(np.sqrt(pixels.shape[1])))
        shape = (1, side, side) if side * side == pixels.shape[1] else (pixels.shape[1],)
    return pixels.reshape((len(arr),) + tuple(shape)), labels


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_sizes(n, train_frac, val_frac):
    n_train = int(round(n * train_frac))
    n_val = int(round(n * val_frac))
    return n_train, n_val, n - n_train - n_val


def ingest_arrays(x, y, classes=None, train_frac=0.72, val_frac=0.08, seed=0, test=None) -> SplitData:
    """Split and normalize raw ``[0, 1]`` images.

    If ``test`` is given it is used as the fixed test set and ``x, y`` are
    split into train and validation only, with ``train_frac`` as the train
    share (0.9 gives the usual 90/10 split).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    classes = int(classes if classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= classes:
        raise DataError(f"labels must lie in [0, {classes})")
    if test is not None:
        val_frac = 1.0 - train_frac
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac > 1 + 1e-12:
        raise DataError("split fractions must be positive and sum to at most 1")
    h = hashlib.sha256(np.ascontiguousarray(x).tobytes() + np.ascontiguousarray(y).tobytes())
    order = np.random.default_rng(seed).permutation(len(y))
    n_train, n_val, n_test = split_sizes(len(y), train_frac, val_frac)
    if test is None and n_test <= 0:
        raise DataError("no held-out test set left after the split")
    tr, va, te = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    norm = Normalizer.fit(x[tr])
    train = Dataset(norm.apply(x[tr]), y[tr])
    val = Dataset(norm.apply(x[va]), y[va])
    if test is not None:
        tx, ty = test
        h.update(np.ascontiguousarray(tx, dtype=np.float64).tobytes() + np.ascontiguousarray(ty).tobytes())
        test_ds = Dataset(norm.apply(np.asarray(tx, dtype=np.float64)), np.asarray(ty, dtype=int))
    else:
        test_ds = Dataset(norm.apply(x[te]), y[te])
    return SplitData(train, val, test_ds, norm, classes, h.hexdigest())


def ingest_dataset(path, fmt="idx", labels_path=None, classes=None, train_frac=0.72, val_frac=0.08, seed=0):
    """Read ``path`` (IDX images + ``labels_path``, or CSV) and return a normalized split."""
    if fmt == "idx":
        if labels_path is None:
            raise DataError("IDX ingestion needs a labels file")
        x, y = load_idx_pair(path, labels_path)
    elif fmt == "csv":
        x, y = load_csv(path)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    return ingest_arrays(x, y, classes=classes, train_frac=train_frac, val_frac=val_frac, seed=seed)


def export_digits(out_dir) -> tuple:
    """Write scikit-learn's bundled 8x8 digits as an IDX image/label pair.

    Pixel intensities 0..16 are rescaled to 0..255. This is the desk
    stand-in for MNIST and needs no network access.
    """
    from pathlib import Path

    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ip, lp = out / "digits-images.idx", out / "digits-labels.idx"
    write_idx(ip, imgs)
    write_idx(lp, d.target.astype(np.uint8))
    return ip, lp
