"""Tabular regression data: loading, min-max scaling, node partitions.

Arrays follow the numpy convention of one sample per row, so a feature
matrix has shape ``(N, d)``.  Scaling statistics are computed on the full
table before any split; the small train/test leakage this implies mirrors
the global preprocessing of the reference experiments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

PartitionMode = Literal["balanced", "noniid_abs_y", "noniid_x_norm", "imbalanced"]


class DatasetError(ValueError):
    """Raised for unreadable files and infeasible partition requests."""


@dataclass(frozen=True)
class RawDataset:
    features: np.ndarray  # (N, d)
    targets: np.ndarray  # (N,)
    name: str = "data"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DatasetError(f"features must be a non-empty 2-D array, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DatasetError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DatasetError("non-finite entries in dataset")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Scaling:
    col_min: np.ndarray
    col_max: np.ndarray
    y_min: float
    y_max: float


@dataclass(frozen=True)
class Dataset:
    """Normalised dataset: features in [0, 1], targets in [-1, 1]."""

    features: np.ndarray
    targets: np.ndarray
    scaling: Scaling
    name: str = "data"

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def denormalize(self, X: np.ndarray | None = None, y: np.ndarray | None = None):
        """Map normalised features/targets back to raw units."""
        s = self.scaling
        X = self.features if X is None else np.asarray(X, dtype=float)
        y = self.targets if y is None else np.asarray(y, dtype=float)
        X_raw = s.col_min + X * (s.col_max - s.col_min)
        y_raw = s.y_min + (y + 1.0) * 0.5 * (s.y_max - s.y_min)
        return X_raw, y_raw


@dataclass(frozen=True)
class Partition:
    node_shards: tuple[np.ndarray, ...]
    mode: str

    @property
    def J(self) -> int:
        return len(self.node_shards)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.node_shards]

    def to_json(self) -> str:
        return json.dumps(
            {"mode": self.mode, "node_shards": [s.tolist() for s in self.node_shards]}
        )

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        obj = json.loads(text)
        return cls(tuple(np.asarray(s, dtype=np.int64) for s in obj["node_shards"]), obj["mode"])


@dataclass(frozen=True)
class Shard:
    node: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    train_idx: np.ndarray = field(repr=False, default=None)
    test_idx: np.ndarray = field(repr=False, default=None)

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]


# --------------------------------------------------------------------------- loading


def load_table(
    path: str | Path,
    format: Literal["csv", "libsvm"] = "csv",
    target: str = "target",
    n_features: int | None = None,
    name: str | None = None,
) -> RawDataset:
    """Read a dense regression table.

    Parameters
    ----------
    path
        File to read.
    format
        ``"csv"``: header row, comma delimiter, target in column ``target``.
        ``"libsvm"``: lines of ``<target> idx:val ...`` with 1-based indices;
        indices absent from a line are zero.
    target
        Target column name (csv only).
    n_features
        Dense width for libsvm input; defaults to the largest index seen.
    """
    path = Path(path)
    name = name or path.stem
    if format == "csv":
        X, y = _read_csv(path, target)
    elif format == "libsvm":
        X, y = _read_libsvm(path, n_features)
    else:
        raise DatasetError(f"unknown format {format!r}")
    return RawDataset(X, y, name)


def _read_csv(path: Path, target: str):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if target not in header:
            raise DatasetError(f"{path}: target column {target!r} not in header {header}")
        t = header.index(target)
        rows, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            ys.append(vals[t])
            rows.append(vals[:t] + vals[t + 1 :])
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    if len(header) < 2:
        raise DatasetError(f"{path}: need at least one feature column")
    return np.array(rows, dtype=float), np.array(ys, dtype=float)


def _read_libsvm(path: Path, n_features: int | None):
    ys: list[float] = []
    entries: list[list[tuple[int, float]]] = []
    max_idx = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                ys.append(float(parts[0]))
                row = []
                for tok in parts[1:]:
                    i, v = tok.split(":")
                    i = int(i)
                    if i < 1:
                        raise ValueError(f"index {i} < 1")
                    row.append((i, float(v)))
                    max_idx = max(max_idx, i)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed libsvm row ({exc})") from None
            entries.append(row)
    if not ys:
        raise DatasetError(f"{path}: empty file")
    d = n_features if n_features is not None else max_idx
    if d < max_idx:
        raise DatasetError(f"{path}: index {max_idx} exceeds n_features={d}")
    X = np.zeros((len(ys), max(d, 1)))
    for r, row in enumerate(entries):
        for i, v in row:
            X[r, i - 1] = v
    return X, np.array(ys)


# --------------------------------------------------------------------------- scaling


def normalize(raw: RawDataset) -> Dataset:
    """Min-max scale columns to [0, 1] and targets to [-1, 1].

    Constant columns map to 0; a constant target maps to 0 as well.
    """
    X, y = raw.features, raw.targets
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    Xn = np.where(span > 0, (X - lo) / safe, 0.0)
    y_lo, y_hi = float(y.min()), float(y.max())
    if y_hi > y_lo:
        yn = 2.0 * (y - y_lo) / (y_hi - y_lo) - 1.0
    else:
        yn = np.zeros_like(y)
    return Dataset(
        np.clip(Xn, 0.0, 1.0),
        np.clip(yn, -1.0, 1.0),
        Scaling(lo, hi, y_lo, y_hi),
        raw.name,
    )


# --------------------------------------------------------------------------- partitions


def _chunk_sizes(N: int, J: int) -> list[int]:
    base, extra = divmod(N, J)
    return [base + (1 if j < extra else 0) for j in range(J)]


def _check_J(N: int, J: int):
    if J < 1:
        raise DatasetError(f"J must be >= 1, got {J}")
    if J > N:
        raise DatasetError(f"cannot split {N} rows over {J} nodes")


def _chunk(order: np.ndarray, sizes: Sequence[int]) -> tuple[np.ndarray, ...]:
    bounds = np.cumsum([0, *sizes])
    return tuple(order[bounds[j] : bounds[j + 1]].copy() for j in range(len(sizes)))


def partition_balanced(ds: Dataset, J: int, seed: int = 0) -> Partition:
    _check_J(ds.n, J)
    order = np.random.default_rng(seed).permutation(ds.n)
    return Partition(_chunk(order, _chunk_sizes(ds.n, J)), "balanced")


def partition_noniid(
    ds: Dataset, J: int, mode: Literal["noniid_abs_y", "noniid_x_norm"] = "noniid_abs_y"
) -> Partition:
    """Sort rows by ``|y|`` or ``||x||_2`` descending and hand out contiguous blocks.

    Node ``j`` gets ``floor(N/J)`` rows plus one for the first ``N mod J``
    nodes.  Rows keep their sorted order inside a block.
    """
    _check_J(ds.n, J)
    if mode == "noniid_abs_y":
        key = np.abs(ds.targets)
    elif mode == "noniid_x_norm":
        key = np.linalg.norm(ds.features, axis=1)
    else:
        raise DatasetError(f"unknown non-IID mode {mode!r}")
    # stable sort on -key: equal keys keep original row order
    order = np.argsort(-key, kind="stable")
    return Partition(_chunk(order, _chunk_sizes(ds.n, J)), mode)


def imbalanced_sizes(N: int, J: int) -> list[int]:
    sizes = [int(math.floor(N * (2 * j - 1) / J**2 + 0.5)) for j in range(1, J)]
    sizes.append(N - sum(sizes))
    if min(sizes) <= 0:
        raise DatasetError(
            f"imbalanced split of N={N} over J={J} leaves an empty node; use a larger N"
        )
    return sizes


def partition_imbalanced(ds: Dataset, J: int, seed: int = 0) -> Partition:
    """Node ``j`` (1-based) receives ``round(N (2j-1) / J^2)`` shuffled rows.

    The rounding residue goes to the last node so the sizes sum to ``N``.
    """
    if J < 1:
        raise DatasetError(f"J must be >= 1, got {J}")
    sizes = imbalanced_sizes(ds.n, J)
    order = np.random.default_rng(seed).permutation(ds.n)
    return Partition(_chunk(order, sizes), "imbalanced")


def make_partition(ds: Dataset, J: int, mode: str, seed: int = 0) -> Partition:
    if mode == "balanced":
        return partition_balanced(ds, J, seed)
    if mode == "imbalanced":
        return partition_imbalanced(ds, J, seed)
    return partition_noniid(ds, J, mode)


def split_train_test(p: Partition, ds: Dataset, seed: int = 0) -> list[Shard]:
    """Shuffle each node's rows and split them in half; odd sizes give train the extra row."""
    streams = np.random.SeedSequence(seed).spawn(p.J)
    shards = []
    for j, (idx, ss) in enumerate(zip(p.node_shards, streams)):
        if len(idx) < 2:
            raise DatasetError(f"node {j} has {len(idx)} rows; need at least 2 to split")
        perm = np.random.default_rng(ss).permutation(idx)
        n_tr = (len(perm) + 1) // 2
        tr, te = perm[:n_tr], perm[n_tr:]
        shards.append(
            Shard(
                j,
                ds.features[tr],
                ds.targets[tr],
                ds.features[te],
                ds.targets[te],
                train_idx=tr,
                test_idx=te,
            )
        )
    return shards
