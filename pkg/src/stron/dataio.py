"""LibSVM-format parsing, train/test splitting, k-fold partitions and subsampling.

Datasets are stored as immutable CSR matrices with labels in {-1.0, +1.0}.
Feature indices are 1-based in the text format and 0-based internally.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
import scipy.sparse as sp


class ParseError(ValueError):
    """Malformed LibSVM input; message names the offending line number."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SparseDataset:
    """Immutable sparse binary-classification dataset.

    ``X`` is an n_points x n_features CSR matrix with canonical (sorted,
    deduplicated) structure. ``y`` holds one label per row, each exactly
    -1.0 or +1.0.
    """

    X: sp.csr_matrix
    y: np.ndarray

    def __post_init__(self) -> None:
        X, y = self.X, self.y
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"row/label count mismatch: {X.shape[0]} != {y.shape[0]}")
        bad = ~np.isin(y, (-1.0, 1.0))
        if bad.any():
            raise ValueError(f"labels must be exactly -1.0 or +1.0, got {y[bad][:5]}")
        X.sum_duplicates()
        X.sort_indices()
        for arr in (X.data, X.indices, X.indptr, y):
            _freeze(arr)

    @property
    def n_points(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def row_pairs(self, i: int) -> list[tuple[int, float]]:
        """Sparse row ``i`` as (1-based feature index, value) pairs."""
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        return [(int(j) + 1, float(v)) for j, v in zip(self.X.indices[lo:hi], self.X.data[lo:hi])]


@dataclass(frozen=True)
class IndexSubset:
    """A subset of row indices, either an explicit sorted list or the full set.

    The ``full`` kind stands for every row of whatever dataset the subset is
    applied to, without materializing the indices.
    """

    kind: Literal["explicit-list", "full"]
    indices: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        if self.kind == "full":
            if self.indices is not None:
                raise ValueError("full subsets carry no index array")
            return
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("explicit subset must be a nonempty 1-d index array")
        if idx.size and idx.min() < 0:
            raise ValueError("negative row index in subset")
        if np.unique(idx).size != idx.size:
            raise ValueError("subset indices must be unique")
        object.__setattr__(self, "indices", _freeze(np.sort(idx)))

    @classmethod
    def full(cls) -> "IndexSubset":
        return cls(kind="full")

    @classmethod
    def of(cls, indices) -> "IndexSubset":
        return cls(kind="explicit-list", indices=np.asarray(indices, dtype=np.int64))

    @property
    def is_full(self) -> bool:
        return self.kind == "full"

    def size(self, n_points: int) -> int:
        return n_points if self.is_full else self.indices.size


def _open_text(source) -> Iterator[str]:
    # str/bytes are treated as content; pass a Path or a file object for files.
    if isinstance(source, bytes):
        yield from io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        yield from io.StringIO(source)
    elif isinstance(source, Path):
        with open(source, "rt", encoding="utf-8") as fh:
            yield from fh
    else:  # file-like
        for line in source:
            yield line.decode("utf-8") if isinstance(line, bytes) else line


def _map_labels(raw: np.ndarray) -> np.ndarray:
    values = sorted(set(raw.tolist()))
    vset = set(values)
    if vset <= {-1.0, 1.0}:
        return raw.copy()
    if vset == {0.0, 1.0} or vset == {0.0}:
        return np.where(raw == 0.0, -1.0, 1.0)
    if vset == {1.0, 2.0} or vset == {2.0}:
        return np.where(raw == 2.0, -1.0, 1.0)
    if len(values) == 1:
        return np.ones_like(raw)
    # generic two-label data: larger value maps to +1
    return np.where(raw == values[1], 1.0, -1.0)


def parse_libsvm(source, n_features: int | None = None) -> SparseDataset:
    """Parse LibSVM text into a :class:`SparseDataset`.

    ``source`` may be a text/bytes blob, a ``Path``, or a file-like object.
    Each nonempty line is ``<label> <idx>:<val> ...`` with 1-based, strictly
    increasing indices. Raw labels are normalized to {-1, +1}: {0,1} maps
    0 to -1, {1,2} maps 2 to -1, {-1,+1} passes through, any other two-label
    scheme maps the larger value to +1. ``n_features`` overrides the default
    (the maximum feature index seen).
    """
    labels: list[float] = []
    indptr = [0]
    col_idx: list[int] = []
    values: list[float] = []
    max_index = 0
    distinct: set[float] = set()

    for lineno, line in enumerate(_open_text(source), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric label {tokens[0]!r}") from None
        distinct.add(label)
        if len(distinct) > 2:
            raise ParseError(
                f"line {lineno}: more than two distinct label values: {sorted(distinct)}"
            )
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(f"line {lineno}: expected index:value, got {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric token {tok!r}") from None
            if idx <= 0:
                raise ParseError(f"line {lineno}: feature index {idx} must be >= 1")
            if idx <= prev:
                raise ParseError(
                    f"line {lineno}: feature indices must strictly increase ({prev} then {idx})"
                )
            prev = idx
            col_idx.append(idx - 1)
            values.append(val)
        max_index = max(max_index, prev)
        labels.append(label)
        indptr.append(len(col_idx))

    n_cols = n_features if n_features is not None else max_index
    if n_features is not None and max_index > n_features:
        raise ParseError(f"feature index {max_index} exceeds n_features override {n_features}")
    raw = np.asarray(labels, dtype=np.float64)
    y = _map_labels(raw) if raw.size else raw
    X = sp.csr_matrix(
        (np.asarray(values, dtype=np.float64), np.asarray(col_idx, dtype=np.int32),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(labels), n_cols),
    )
    return SparseDataset(X=X, y=y)


def to_libsvm(d: SparseDataset) -> str:
    """Serialize back to LibSVM text. Round-trips exactly through parse_libsvm."""
    out = []
    for i in range(d.n_points):
        parts = ["+1" if d.y[i] > 0 else "-1"]
        parts += [f"{j}:{v:.17g}" for j, v in d.row_pairs(i)]
        out.append(" ".join(parts))
    return "\n".join(out) + ("\n" if out else "")


def subset_dataset(d: SparseDataset, indices: np.ndarray | IndexSubset) -> SparseDataset:
    """Materialize the rows of ``indices`` as a new dataset (same feature count)."""
    if isinstance(indices, IndexSubset):
        if indices.is_full:
            return d
        indices = indices.indices
    idx = np.asarray(indices, dtype=np.int64)
    return SparseDataset(X=sp.csr_matrix(d.X[idx]), y=d.y[idx].copy())


def split_train_test(
    d: SparseDataset, train_fraction: float, seed: int
) -> tuple[SparseDataset, SparseDataset]:
    """Disjoint random train/test partition, deterministic for a fixed seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = d.n_points
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.clip(round(train_fraction * n), 1, n - 1))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return subset_dataset(d, train_idx), subset_dataset(d, test_idx)


def k_fold(d: SparseDataset, k: int, seed: int) -> list[tuple[IndexSubset, IndexSubset]]:
    """k disjoint (train, test) index subsets; the test subsets partition the rows."""
    n = d.n_points
    if not 2 <= k <= n:
        raise ValueError(f"k must satisfy 2 <= k <= n_points ({n}), got {k}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    stop = np.cumsum(sizes)
    start = stop - sizes
    all_idx = np.arange(n)
    folds = []
    for a, b in zip(start, stop):
        test_idx = np.sort(perm[a:b])
        train_idx = np.setdiff1d(all_idx, test_idx, assume_unique=True)
        folds.append((IndexSubset.of(train_idx), IndexSubset.of(test_idx)))
    return folds


def draw_subsample(n_points: int, size: int, rng: np.random.Generator) -> IndexSubset:
    """Draw ``size`` distinct row indices uniformly without replacement.

    Uses a partial Fisher-Yates shuffle, so the cost is O(size) random draws.
    Returns the ``full`` kind (consuming no randomness) when size == n_points.
    """
    if not 1 <= size <= n_points:
        raise ValueError(f"size must satisfy 1 <= size <= {n_points}, got {size}")
    if size == n_points:
        return IndexSubset.full()
    pool = np.arange(n_points, dtype=np.int64)
    js = rng.integers(np.arange(size), n_points)
    for i in range(size):
        j = js[i]
        pool[i], pool[j] = pool[j], pool[i]
    return IndexSubset.of(pool[:size])


def make_synthetic(
    n_points: int = 5000,
    n_features: int = 50,
    seed: int = 0,
    nnz_per_row: int | None = None,
    flip_fraction: float = 0.02,
) -> SparseDataset:
    """Generate a sparse, nearly separable binary dataset.

    Labels come from a random ground-truth hyperplane; ``flip_fraction`` of
    them are flipped so the problem is realistic rather than exactly
    separable. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    k = nnz_per_row if nnz_per_row is not None else max(1, n_features // 5)
    k = min(k, n_features)
    w_true = rng.normal(size=n_features)
    cols = np.empty(n_points * k, dtype=np.int32)
    for i in range(n_points):
        cols[i * k : (i + 1) * k] = np.sort(rng.choice(n_features, size=k, replace=False))
    data = rng.normal(size=n_points * k)
    indptr = np.arange(0, n_points * k + 1, k, dtype=np.int64)
    X = sp.csr_matrix((data, cols, indptr), shape=(n_points, n_features))
    margins = X @ w_true
    y = np.where(margins >= 0, 1.0, -1.0)
    flips = rng.random(n_points) < flip_fraction
    y[flips] *= -1.0
    return SparseDataset(X=X, y=y)
