"""Long-format clustered data: ingestion, validation, and predictor screening.

A dataset holds n independent clusters (subjects); cluster i contributes
m_i observations of a continuous outcome plus a p-vector of covariates.
Cluster order is first appearance in the source; within-cluster row order
is preserved, and subsampling indices always refer to that order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .exceptions import (
    EmptyDataError,
    ParseError,
    SchemaError,
    SizeViolationError,
)

logger = logging.getLogger(__name__)

INTERCEPT_NAME = "intercept"


@dataclass(frozen=True)
class Observation:
    """One row of a clustered dataset."""

    cluster_id: str
    outcome: float
    covariates: np.ndarray


@dataclass(frozen=True)
class ClusteredDataset:
    """Immutable store of clustered observations in stacked-array form.

    Parameters
    ----------
    y : ndarray, shape (N,)
        Outcomes, clusters stacked in order.
    X : ndarray, shape (N, p)
        Covariate rows aligned with ``y``.
    sizes : ndarray, shape (n,)
        Observations per cluster; ``sizes.sum() == N``.
    ids : tuple of str
        Cluster identifiers, one per cluster, in storage order.
    columns : tuple of str
        Covariate column names, length p.
    intercept : bool
        True when column 0 is an all-ones intercept.
    """

    y: np.ndarray
    X: np.ndarray
    sizes: np.ndarray
    ids: tuple
    columns: tuple
    intercept: bool = False
    offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        sizes = np.ascontiguousarray(self.sizes, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("y and X row counts differ")
        if sizes.ndim != 1 or sizes.size == 0:
            raise EmptyDataError("dataset needs at least one cluster")
        if (sizes < 1).any():
            raise ValueError("every cluster needs at least one observation")
        if sizes.sum() != y.shape[0]:
            raise ValueError("cluster sizes do not add up to the row count")
        if len(self.ids) != sizes.size:
            raise ValueError("one id per cluster required")
        if len(self.columns) != X.shape[1]:
            raise ValueError("one name per covariate column required")
        if not np.isfinite(y).all() or not np.isfinite(X).all():
            raise ValueError("outcomes and covariates must be finite")
        if self.intercept and not (X[:, 0] == 1.0).all():
            raise ValueError("intercept flag set but column 0 is not all ones")
        offsets = np.zeros(sizes.size + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        for arr in (y, X, sizes, offsets):
            arr.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "columns", tuple(str(c) for c in self.columns))
        object.__setattr__(self, "offsets", offsets)

    @property
    def n(self) -> int:
        """Number of clusters."""
        return self.sizes.size

    @property
    def p(self) -> int:
        """Covariate dimension."""
        return self.X.shape[1]

    @property
    def n_obs(self) -> int:
        """Total observation count N."""
        return self.y.shape[0]

    @property
    def min_size(self) -> int:
        """min(m_i), the largest legal per-cluster subsample size."""
        return int(self.sizes.min())

    def cluster(self, i: int):
        """(y_i, X_i) views for cluster ``i`` in storage order."""
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return self.y[sl], self.X[sl]

    def observations(self) -> Iterator[Observation]:
        for i, cid in enumerate(self.ids):
            yi, Xi = self.cluster(i)
            for j in range(yi.shape[0]):
                yield Observation(cid, float(yi[j]), Xi[j])

    def size_groups(self):
        """Clusters grouped by size for vectorized per-cluster reductions.

        Returns a list of ``(m, cluster_idx, row_idx)`` with ``row_idx`` of
        shape (c, m) giving the stacked-row positions of the c clusters of
        size m, in cluster storage order.
        """
        groups = []
        sizes = self.sizes
        for m in np.unique(sizes):
            which = np.flatnonzero(sizes == m)
            rows = self.offsets[which][:, None] + np.arange(m)[None, :]
            groups.append((int(m), which, rows))
        return groups

    @classmethod
    def from_arrays(cls, y, X, cluster_labels, columns=None, intercept=False,
                    add_intercept=False) -> "ClusteredDataset":
        """Build a dataset from row-aligned arrays.

        Rows are grouped by ``cluster_labels`` in label first-appearance
        order; within-cluster row order is kept.  ``add_intercept``
        prepends an all-ones column.
        """
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        labels = [str(c) for c in cluster_labels]
        if len(labels) != y.shape[0]:
            raise ValueError("one cluster label per row required")
        order: dict[str, list[int]] = {}
        for row, lab in enumerate(labels):
            order.setdefault(lab, []).append(row)
        perm = np.concatenate([np.asarray(v) for v in order.values()]) if order else np.array([], int)
        sizes = np.array([len(v) for v in order.values()], dtype=np.int64)
        if columns is None:
            columns = tuple(f"x{j}" for j in range(X.shape[1]))
        y, X = y[perm], X[perm]
        if add_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
            columns = (INTERCEPT_NAME,) + tuple(columns)
            intercept = True
        return cls(y=y, X=X, sizes=sizes, ids=tuple(order.keys()),
                   columns=tuple(columns), intercept=intercept)


def _parse_cell(token: str, row: int, column: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(
            f"row {row}: column {column!r} value {token!r} is not numeric",
            row=row, column=column) from None
    if not math.isfinite(value):
        raise ParseError(
            f"row {row}: column {column!r} value {token!r} is not finite",
            row=row, column=column)
    return value


def load_long_csv(path, outcome_col: str, cluster_col: str,
                  covariate_cols: Sequence[str],
                  add_intercept: bool = False) -> ClusteredDataset:
    """Read a long-format CSV (one row per observation) into a dataset.

    The file must be comma-separated UTF-8 with a header row; outcome and
    covariate cells must parse as finite decimals ('.' separator).  Rows
    are grouped by the cluster column in first-appearance order, keeping
    within-cluster order, so clusters need not be contiguous in the file.
    """
    covariate_cols = list(covariate_cols)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataError(f"{path}: file is empty") from None
        positions = {}
        for name in [outcome_col, cluster_col, *covariate_cols]:
            if name not in header:
                raise SchemaError(f"{path}: column {name!r} not in header {header}")
            positions[name] = header.index(name)

        ys: dict[str, list[float]] = {}
        xs: dict[str, list[list[float]]] = {}
        for row_number, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) < len(header):
                raise ParseError(
                    f"row {row_number}: expected {len(header)} fields, got {len(record)}",
                    row=row_number)
            cid = record[positions[cluster_col]]
            yv = _parse_cell(record[positions[outcome_col]], row_number, outcome_col)
            xv = [_parse_cell(record[positions[c]], row_number, c) for c in covariate_cols]
            ys.setdefault(cid, []).append(yv)
            xs.setdefault(cid, []).append(xv)

    if not ys:
        raise EmptyDataError(f"{path}: no data rows")
    y = np.concatenate([np.asarray(v) for v in ys.values()])
    X = np.vstack([np.asarray(rows) for rows in xs.values()])
    sizes = np.array([len(v) for v in ys.values()], dtype=np.int64)
    columns = tuple(covariate_cols)
    intercept = False
    if add_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
        columns = (INTERCEPT_NAME,) + columns
        intercept = True
    return ClusteredDataset(y=y, X=X, sizes=sizes, ids=tuple(ys.keys()),
                            columns=columns, intercept=intercept)


def write_long_csv(data: ClusteredDataset, path, outcome_col: str = "outcome",
                   cluster_col: str = "cluster") -> None:
    """Write a dataset back to long CSV at full precision.

    Values are written with shortest round-trip formatting, so loading
    the file again reproduces the dataset bit for bit.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([cluster_col, outcome_col, *data.columns])
        for i, cid in enumerate(data.ids):
            yi, Xi = data.cluster(i)
            for j in range(yi.shape[0]):
                writer.writerow([cid, repr(float(yi[j])), *(repr(float(v)) for v in Xi[j])])


def validate_min_cluster_size(data: ClusteredDataset, B: int,
                              policy: str = "reject") -> ClusteredDataset:
    """Check (or enforce) that every cluster can supply B observations.

    ``reject`` returns the data unchanged iff min(m_i) >= B and raises
    otherwise; ``drop`` removes undersized clusters, logging each removal.
    """
    if B < 1:
        raise ValueError("B must be a positive integer")
    small = np.flatnonzero(data.sizes < B)
    if policy == "reject":
        if small.size:
            bad = [data.ids[i] for i in small]
            raise SizeViolationError(
                f"clusters smaller than B={B}: {bad}", clusters=bad)
        return data
    if policy != "drop":
        raise ValueError(f"unknown policy {policy!r}")
    if not small.size:
        return data
    keep = np.flatnonzero(data.sizes >= B)
    if not keep.size:
        raise EmptyDataError(f"dropping clusters smaller than B={B} removes all data")
    for i in small:
        logger.info("dropping cluster %s (size %d < B=%d)",
                    data.ids[i], data.sizes[i], B)
    rows = np.concatenate([np.arange(data.offsets[i], data.offsets[i + 1]) for i in keep])
    return ClusteredDataset(
        y=data.y[rows], X=data.X[rows], sizes=data.sizes[keep],
        ids=tuple(data.ids[i] for i in keep), columns=data.columns,
        intercept=data.intercept)


@dataclass(frozen=True)
class ScreenReport:
    """Result of backward correlation screening.

    ``dropped`` lists (column, max |r| against the predictors that were
    still retained when it was removed); entries dropped for zero
    variance carry NaN there and a note in ``warnings``.
    """

    retained: tuple
    dropped: tuple
    warnings: tuple = ()


def screen_predictors(data: ClusteredDataset, threshold: float = 0.5) -> ScreenReport:
    """Backward-select predictors until all pairwise |r| <= threshold.

    At each step the predictor with the largest mean absolute Pearson
    correlation to the other remaining predictors is removed (ties broken
    toward the later column).  The intercept column never participates.
    Constant (zero-variance) predictors have no defined correlation and
    are removed first, each with a warning.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    names = list(data.columns)
    active = [j for j in range(data.p)
              if not (data.intercept and j == 0)]
    if not active:
        raise ValueError("no non-intercept predictors to screen")

    dropped = []
    warnings_ = []
    for j in list(active):
        col = data.X[:, j]
        if np.ptp(col) == 0.0:
            active.remove(j)
            dropped.append((names[j], float("nan")))
            warnings_.append(f"{names[j]}: zero variance, correlation undefined")

    while len(active) >= 2:
        corr = np.corrcoef(data.X[:, active], rowvar=False)
        absr = np.abs(corr)
        np.fill_diagonal(absr, 0.0)
        if absr.max() <= threshold:
            break
        mean_abs = absr.sum(axis=1) / (len(active) - 1)
        best = mean_abs.max()
        pick = max(k for k in range(len(active)) if mean_abs[k] == best)
        dropped.append((names[active[pick]], float(absr[pick].max())))
        del active[pick]

    return ScreenReport(retained=tuple(names[j] for j in active),
                        dropped=tuple(dropped), warnings=tuple(warnings_))
