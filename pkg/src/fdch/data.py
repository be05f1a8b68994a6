"""Paired image/text datasets, splits and label-sharing similarity.

Matrices follow the column-per-instance convention: ``V`` is d_v x n,
``T`` is d_t x n and ``Y`` is c x n.  On disk every CSV row is one instance.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .rng import SPLIT, SYNTH, make_rng


@dataclass(frozen=True)
class Dataset:
    V: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    names: list = None

    def __post_init__(self):
        V = np.asarray(self.V, dtype=np.float64)
        T = np.asarray(self.T, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.uint8)
        if V.ndim != 2 or T.ndim != 2 or Y.ndim != 2:
            raise DatasetError("V, T and Y must be 2-d matrices")
        n = V.shape[1]
        if n < 1:
            raise DatasetError("dataset has no instances")
        if T.shape[1] != n or Y.shape[1] != n:
            raise DatasetError(
                f"column count mismatch: V has {n}, T has {T.shape[1]}, Y has {Y.shape[1]}"
            )
        for name, M in (("image", V), ("text", T)):
            bad = ~np.isfinite(M)
            if bad.any():
                i = int(np.argwhere(bad.any(axis=0))[0, 0])
                raise DatasetError(f"instance {i} has a non-finite {name} feature")
        if np.any(Y > 1):
            raise DatasetError("labels must be 0/1")
        empty = ~Y.any(axis=0)
        if empty.any():
            raise DatasetError(f"instance {int(np.argmax(empty))} has no label")
        if self.names is not None and len(self.names) != n:
            raise DatasetError("names length does not match instance count")
        for M in (V, T, Y):
            M.setflags(write=False)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.V.shape[1]

    @property
    def d_v(self):
        return self.V.shape[0]

    @property
    def d_t(self):
        return self.T.shape[0]

    @property
    def c(self):
        return self.Y.shape[0]

    def ids(self):
        if self.names is not None:
            return list(self.names)
        return [str(i) for i in range(self.n)]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        names = None if self.names is None else [self.names[i] for i in idx]
        return Dataset(self.V[:, idx], self.T[:, idx], self.Y[:, idx], names)


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    query_idx: np.ndarray
    db_idx: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.train_idx, self.query_idx, self.db_idx),
                (other.train_idx, other.query_idx, other.db_idx),
            )
        )


def similarity(Y, i, j):
    """1 if instances ``i`` and ``j`` share at least one label, else 0."""
    n = Y.shape[1]
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"instance index out of range for n={n}: ({i}, {j})")
    return int(np.dot(Y[:, i].astype(np.int64), Y[:, j].astype(np.int64)) > 0)


def similarity_block(Y_rows, Y_cols):
    """Label-sharing indicator between two column sets, shape (m_rows, m_cols).

    Only ever called on a mini-batch against the training set, so memory is
    O(batch * n); the full n x n matrix is never built.
    """
    return (Y_rows.T.astype(np.float64) @ Y_cols.astype(np.float64) > 0).astype(np.float64)


def _read_csv(path, kind, integer=False):
    rows = []
    width = None
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row or (len(row) == 1 and not row[0].strip()):
                raise DatasetError(f"{kind} file {path}: row {r} is empty")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetError(
                    f"{kind} file {path}: row {r} has {len(row)} columns, expected {width}"
                )
            try:
                vals = [int(x) if integer else float(x) for x in row]
            except ValueError:
                raise DatasetError(f"{kind} file {path}: row {r} has an unparsable value") from None
            if not integer and not all(np.isfinite(vals)):
                raise DatasetError(f"{kind} file {path}: row {r} has a non-finite value")
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{kind} file {path} has no rows")
    return np.array(rows, dtype=np.int64 if integer else np.float64)


def load_dataset(features_img, features_txt, labels):
    """Read three row-per-instance CSV files into a :class:`Dataset`."""
    V = _read_csv(features_img, "image")
    T = _read_csv(features_txt, "text")
    Y = _read_csv(labels, "labels", integer=True)
    if not (len(V) == len(T) == len(Y)):
        raise DatasetError(
            f"row count mismatch: image {len(V)}, text {len(T)}, labels {len(Y)}"
        )
    bad = np.argwhere((Y != 0) & (Y != 1))
    if len(bad):
        raise DatasetError(f"instance {bad[0, 0]} has a label value other than 0/1")
    empty = ~Y.any(axis=1)
    if empty.any():
        raise DatasetError(f"instance {int(np.argmax(empty))} has no label")
    return Dataset(V.T, T.T, Y.T)


def _write_csv(path, M, integer=False):
    fmt = str if integer else (lambda x: repr(float(x)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for col in M.T:
            w.writerow([fmt(x) for x in col.tolist()])


def save_dataset(ds, features_img, features_txt, labels):
    """Write the three CSV files.

    Floats are written as their shortest round-trip repr, so loading the
    files back reproduces every value bit for bit.
    """
    _write_csv(features_img, ds.V)
    _write_csv(features_txt, ds.T)
    _write_csv(labels, ds.Y, integer=True)
    return [Path(features_img), Path(features_txt), Path(labels)]


def make_synthetic(n, d_v, d_t, c, noise, seed):
    """Class-clustered paired features with one-hot labels.

    Draw order from the seeded stream: image centers (c x d_v, uniform in
    [-1, 1]), text centers (c x d_t), image noise (n x d_v), text noise
    (n x d_t).  Instance ``i`` belongs to class ``i % c``.
    """
    if c < 2:
        raise DatasetError(f"need at least 2 classes, got c={c}")
    if n < c:
        raise DatasetError(f"need n >= c, got n={n}, c={c}")
    if d_v < 1 or d_t < 1:
        raise DatasetError("feature dimensions must be positive")
    if not noise >= 0:
        raise DatasetError(f"noise must be non-negative, got {noise}")
    rng = make_rng(seed, SYNTH)
    cv = rng.uniform(-1.0, 1.0, size=(c, d_v))
    ct = rng.uniform(-1.0, 1.0, size=(c, d_t))
    ev = rng.standard_normal((n, d_v))
    et = rng.standard_normal((n, d_t))
    cls = np.arange(n) % c
    V = cv[cls] + noise * ev
    T = ct[cls] + noise * et
    Y = np.zeros((c, n), dtype=np.uint8)
    Y[cls, np.arange(n)] = 1
    return Dataset(V.T, T.T, Y)


def split_dataset(ds, n_query, n_train, seed):
    """Sample query / database / training partitions.

    Queries are drawn without replacement; the database is everything else
    and the training set is drawn from the database.  Indices are returned
    sorted.
    """
    n = ds.n
    if n_query < 1:
        raise DatasetError(f"n_query must be at least 1, got {n_query}")
    if n_query >= n:
        raise DatasetError(f"empty database: n_query={n_query} leaves nothing of n={n}")
    if not 1 <= n_train <= n - n_query:
        raise DatasetError(f"n_train={n_train} out of range 1..{n - n_query}")
    rng = make_rng(seed, SPLIT)
    perm = rng.permutation(n)
    query = np.sort(perm[:n_query])
    db = np.sort(perm[n_query:])
    train = np.sort(rng.choice(db, size=n_train, replace=False))
    return Split(train_idx=train, query_idx=query, db_idx=db)
