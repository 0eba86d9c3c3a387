"""Synthetic data generation, LibSVM parsing and worker sharding.

Everything here is a pure function of its seed; datasets are immutable
after construction and stored dense (desk-scale dimensions only).
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (m, d) float64
    labels: np.ndarray  # (m,)
    kind: str  # "regression" or "binary"

    def __post_init__(self):
        if self.kind not in ("regression", "binary"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the sample count")
        if self.kind == "binary" and not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("binary labels must be in {-1, +1}")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Shard:
    worker: int
    rows: np.ndarray  # row indices into the parent dataset


def _seed_words(seed) -> tuple[int, ...]:
    """Map a tuple of ints/strings to SeedSequence entropy words."""
    if not isinstance(seed, (tuple, list)):
        seed = (seed,)
    words = []
    for part in seed:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode()))
        else:
            words.append(int(part) & 0xFFFFFFFF)
    return tuple(words)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_seed_words(seed))))


def make_regression(
    m: int,
    d: int,
    n_informative: int = 10,
    noise_std: float = 0.0,
    seed: int = 0,
) -> tuple[Dataset, np.ndarray]:
    """Gaussian regression data with a sparse ground-truth weight vector.

    Features are iid standard normal; the weight vector is supported on
    ``n_informative`` coordinates with entries uniform on [0, 100); labels
    are A @ w plus optional Gaussian noise. Returns (dataset, w).
    """
    if m < 1 or d < 1 or not (1 <= n_informative <= d):
        raise ValueError("invalid sizes for make_regression")
    rng = _rng(("make_regression", seed, m, d))
    A = rng.normal(size=(m, d))
    w = np.zeros(d)
    support = rng.permutation(d)[:n_informative]
    w[support] = rng.uniform(0.0, 100.0, size=n_informative)
    y = A @ w
    if noise_std > 0:
        y = y + noise_std * rng.normal(size=m)
    return Dataset(A, y, "regression"), w


def make_interpolation_regression(
    m: int,
    d: int,
    n_workers: int,
    seed: int = 0,
) -> tuple[Dataset, np.ndarray]:
    """Noise-free data from one shared weight vector.

    With zero regularization every worker's local gradient vanishes at the
    shared optimum, i.e. the overparameterized regime.
    """
    if n_workers > m:
        raise ValueError("need at least one row per worker")
    return make_regression(m, d, n_informative=min(10, d), noise_std=0.0, seed=seed)


class LibSVMFormatError(ValueError):
    pass


def parse_libsvm(path, d: int | None = None) -> Dataset:
    """Parse a LibSVM text file ("label idx:val ...", 1-based indices).

    The dimension defaults to the maximum feature index seen. Labels are
    mapped to {-1, +1}. Duplicate indices within a line are rejected;
    out-of-order indices only draw a warning.
    """
    rows: list[dict[int, float]] = []
    labels: list[float] = []
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise LibSVMFormatError(f"{path}:{lineno}: bad label {parts[0]!r}")
            entries: dict[int, float] = {}
            prev = 0
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":")
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise LibSVMFormatError(f"{path}:{lineno}: bad entry {tok!r}")
                if idx < 1:
                    raise LibSVMFormatError(f"{path}:{lineno}: indices are 1-based, got {idx}")
                if idx in entries:
                    raise LibSVMFormatError(f"{path}:{lineno}: duplicate index {idx}")
                if idx < prev:
                    warnings.warn(f"{path}:{lineno}: out-of-order index {idx}")
                prev = idx
                entries[idx] = val
                max_idx = max(max_idx, idx)
            rows.append(entries)

    dim = d if d is not None else max_idx
    if dim < max_idx:
        raise LibSVMFormatError(f"{path}: feature index {max_idx} exceeds stated dimension {dim}")
    A = np.zeros((len(rows), dim))
    for r, entries in enumerate(rows):
        for idx, val in entries.items():
            A[r, idx - 1] = val
    y = np.asarray(labels)
    uniq = np.unique(y)
    if len(uniq) != 2 and not np.all(np.isin(uniq, (-1.0, 1.0))):
        raise LibSVMFormatError(f"{path}: expected binary labels, found {uniq[:5]}")
    # map {a, b} with a < b to {-1, +1}
    mapped = np.where(y == uniq.max(), 1.0, -1.0)
    return Dataset(A, mapped, "binary")


def write_libsvm(path, dataset: Dataset) -> None:
    """Serialize a dataset in LibSVM text format (test round-trip helper)."""
    with open(path, "w") as fh:
        for row, label in zip(dataset.features, dataset.labels):
            toks = [repr(float(label)) if label not in (-1.0, 1.0) else str(int(label))]
            for j, v in enumerate(row):
                if v != 0.0:
                    toks.append(f"{j + 1}:{float(v)!r}")
            fh.write(" ".join(toks) + "\n")


def shard(dataset: Dataset, n: int, seed: int = 0) -> list[Shard]:
    """Random even partition of rows into n contiguous blocks of a permutation."""
    m = dataset.m
    if n > m:
        raise ValueError(f"cannot shard {m} rows across {n} workers")
    perm = _rng(("shard", seed, m, n)).permutation(m)
    bounds = np.linspace(0, m, n + 1).astype(int)
    return [Shard(i, perm[bounds[i]:bounds[i + 1]]) for i in range(n)]


def normalize_features(dataset: Dataset) -> Dataset:
    """Per-feature scaling to unit standard deviation (zero-variance columns kept)."""
    std = dataset.features.std(axis=0)
    std[std == 0] = 1.0
    return Dataset(dataset.features / std, dataset.labels, dataset.kind)
