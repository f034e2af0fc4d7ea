"""Synthetic per-user classification data, its binary file format, and
class-aligned cross-user batch sampling."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .nn import FormatError
from .rng import substream

LABEL_MODES = ("shared", "independent")


@dataclass
class Dataset:
    x: np.ndarray
    u: np.ndarray  # 1-based class labels
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.int64)
        if self.x.ndim != 2 or self.u.shape != (self.x.shape[0],):
            raise ValueError(f"inconsistent dataset shapes x={self.x.shape} u={self.u.shape}")
        if self.u.size and (self.u.min() < 1 or self.u.max() > self.num_classes):
            raise ValueError(f"labels must lie in [1, {self.num_classes}]")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def by_class(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.u == c) for c in range(1, self.num_classes + 1)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and np.array_equal(self.x, other.x)
                and np.array_equal(self.u, other.u))


@dataclass(frozen=True)
class GenSpec:
    n_users: int = 2
    num_classes: int = 4
    input_dim: int = 8
    n_train: int = 2000
    n_test: int = 2000
    c_sep: float = 4.0
    sigma_x: float = 1.0
    label_mode: str = "shared"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.c_sep <= 0 or self.sigma_x <= 0:
            raise ValueError("c_sep and sigma_x must be > 0")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")


@dataclass
class BatchPair:
    """One class-aligned mini-batch across all users."""

    x: list[np.ndarray]
    u: list[np.ndarray]
    w: np.ndarray

    @property
    def size(self) -> int:
        return int(self.w.size)


def class_centers(spec: GenSpec, user: int) -> np.ndarray:
    rng = substream(spec.seed, "centers", user)
    dirs = rng.standard_normal((spec.num_classes, spec.input_dim))
    return spec.c_sep * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _balanced_labels(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % K) + 1


def gen_synthetic(spec: GenSpec, split: str = "train") -> list[Dataset]:
    """Gaussian-mixture data, one dataset per user.

    Each user has its own class centers (fixed across splits).  Labels are
    balanced so every class has at least ``n // K`` samples; in shared mode
    all users carry the same label sequence.
    """
    n = spec.n_train if split == "train" else spec.n_test
    K = spec.num_classes
    if K > n:
        raise ValueError(f"num_classes={K} exceeds sample count {n}")
    if n < 2 * K:
        raise ValueError("need at least two samples per class")
    shared = _balanced_labels(n, K, substream(spec.seed, "labels", split))
    out = []
    for user in range(spec.n_users):
        centers = class_centers(spec, user)
        if spec.label_mode == "shared":
            u = shared
        else:
            u = _balanced_labels(n, K, substream(spec.seed, "labels", split, user))
        noise = substream(spec.seed, "samples", split, user).standard_normal((n, spec.input_dim))
        out.append(Dataset(centers[u - 1] + spec.sigma_x * noise, u.copy(), K))
    return out


def nearest_center_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of assigning each test point to the closest empirical class mean."""
    means = np.stack([train.x[train.u == c].mean(axis=0) for c in range(1, train.num_classes + 1)])
    d2 = ((test.x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) + 1 == test.u))


def draw_batch(datasets: list[Dataset], V: int, rng: np.random.Generator, label_mode: str = "shared",
               index: list[dict[int, np.ndarray]] | None = None) -> BatchPair:
    """Draw V slots.  Shared mode: one class per slot, an independent sample of that
    class for every user.  Independent mode: each user draws its own class; the
    conditioning class of a slot is the first user's class."""
    if label_mode not in LABEL_MODES:
        raise ValueError(f"label_mode must be one of {LABEL_MODES}")
    K = datasets[0].num_classes
    index = index or [ds.by_class() for ds in datasets]
    w = rng.integers(1, K + 1, size=V)
    xs, us = [], []
    for user, (ds, groups) in enumerate(zip(datasets, index)):
        u = w if label_mode == "shared" or user == 0 else rng.integers(1, K + 1, size=V)
        rows = np.empty(V, dtype=np.intp)
        for c in np.unique(u):
            slots = np.flatnonzero(u == c)
            rows[slots] = groups[int(c)][rng.integers(0, groups[int(c)].size, size=slots.size)]
        xs.append(ds.x[rows])
        us.append(u.copy())
    return BatchPair(xs, us, w.copy())


def class_aligned_batches(datasets: list[Dataset], V: int, rng: np.random.Generator,
                          n_batches: int | None = None, label_mode: str = "shared") -> Iterator[BatchPair]:
    """Stream of class-aligned batches; ``n_batches=None`` means one epoch
    (ceil(n / V) batches, so each sample is visited once in expectation)."""
    if V < 2:
        raise ValueError("batch size V must be >= 2")
    if not datasets:
        raise ValueError("no datasets")
    K = datasets[0].num_classes
    index = [ds.by_class() for ds in datasets]
    for user, groups in enumerate(index):
        missing = [c for c, idx in groups.items() if idx.size == 0]
        if missing:
            raise ValueError(f"user {user + 1} has no samples of classes {missing}")
        if datasets[user].num_classes != K:
            raise ValueError("datasets disagree on the number of classes")
    if n_batches is None:
        n_batches = math.ceil(datasets[0].n / V)
    for _ in range(n_batches):
        yield draw_batch(datasets, V, rng, label_mode, index)


# -- dataset file ----------------------------------------------------------

DATA_MAGIC = b"TOIBDATA"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIQII")


def save_dataset(ds: Dataset, path) -> None:
    rec = np.dtype([("x", "<f8", (ds.input_dim,)), ("u", "<u4")])
    records = np.empty(ds.n, dtype=rec)
    records["x"] = ds.x
    records["u"] = ds.u
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, ds.n, ds.input_dim, ds.num_classes))
        fh.write(records.tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, d_x, K = _HEADER.unpack_from(buf)
    if magic != DATA_MAGIC:
        raise FormatError("bad magic", 0)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 8)
    rec = np.dtype([("x", "<f8", (d_x,)), ("u", "<u4")])
    expected = _HEADER.size + n * rec.itemsize
    if len(buf) < expected:
        offset = _HEADER.size + (len(buf) - _HEADER.size) // rec.itemsize * rec.itemsize
        raise FormatError(f"truncated: expected {n} records", offset)
    if len(buf) > expected:
        raise FormatError("trailing bytes after last record", expected)
    records = np.frombuffer(buf, dtype=rec, count=n, offset=_HEADER.size)
    try:
        return Dataset(records["x"].astype(np.float64), records["u"].astype(np.int64), int(K))
    except ValueError as exc:
        raise FormatError(str(exc), _HEADER.size) from None
