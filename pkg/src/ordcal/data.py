"""Dataset container and CSV input/output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Predictor matrix plus ordinal outcome labels coded 1..K.

    Outcomes use the paper-style coding where 1 is the lowest category and
    K the highest.  K may be supplied explicitly (e.g. when an evaluation
    subset happens to miss the top category); otherwise it is inferred as
    the maximum label.
    """

    predictors: np.ndarray
    outcomes: np.ndarray
    K: int
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.predictors, dtype=float)
        y = np.asarray(self.outcomes, dtype=int)
        if X.ndim != 2:
            raise ValueError("predictors must be a 2-D array")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("outcomes must be 1-D with one label per row")
        if not np.all(np.isfinite(X)):
            i, q = np.argwhere(~np.isfinite(X))[0]
            raise ValueError(f"non-finite predictor value at row {i}, column {q}")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if y.size and (y.min() < 1 or y.max() > self.K):
            bad = int(np.argmax((y < 1) | (y > self.K)))
            raise ValueError(
                f"outcome label {y[bad]} at row {bad} outside 1..{self.K}"
            )
        object.__setattr__(self, "predictors", X)
        object.__setattr__(self, "outcomes", y)
        names = tuple(self.column_names) or tuple(
            f"x{q + 1}" for q in range(X.shape[1])
        )
        if len(names) != X.shape[1]:
            raise ValueError("column_names length must match predictor count")
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.predictors.shape[0]

    @property
    def Q(self) -> int:
        return self.predictors.shape[1]

    def category_counts(self) -> np.ndarray:
        return np.bincount(self.outcomes, minlength=self.K + 1)[1:]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.predictors[idx], self.outcomes[idx], self.K, self.column_names
        )


def load_dataset(path, outcome="y", truth_prefix=None):
    """Read a CSV file into a Dataset, optionally splitting off true risks.

    Columns whose name starts with ``truth_prefix`` are collected (in order
    of their numeric suffix) into an n x K matrix of true risks; all other
    non-outcome columns become predictors.  Returns ``(dataset, truth)``
    where truth is None when no prefix is given or no such columns exist.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    if outcome not in header:
        raise ValueError(f"{path}: missing outcome column '{outcome}'")
    truth_cols = []
    if truth_prefix:
        truth_cols = [c for c in header if c.startswith(truth_prefix)]
        truth_cols.sort(key=lambda c: (len(c), c))
    pred_cols = [c for c in header if c != outcome and c not in truth_cols]
    idx = {c: header.index(c) for c in header}

    n = len(rows)
    X = np.empty((n, len(pred_cols)))
    y = np.empty(n, dtype=int)
    T = np.empty((n, len(truth_cols))) if truth_cols else None
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 2} has {len(row)} fields")
        try:
            yv = float(row[idx[outcome]])
        except ValueError:
            raise ValueError(
                f"{path}: non-numeric outcome at row {i + 2}"
            ) from None
        if yv != int(yv):
            raise ValueError(f"{path}: non-integer outcome at row {i + 2}")
        y[i] = int(yv)
        for j, c in enumerate(pred_cols):
            try:
                X[i, j] = float(row[idx[c]])
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric value at row {i + 2}, column '{c}'"
                ) from None
        if T is not None:
            for j, c in enumerate(truth_cols):
                T[i, j] = float(row[idx[c]])
    if y.size == 0:
        raise ValueError(f"{path}: no data rows")
    if y.min() < 1:
        bad = int(np.argmin(y))
        raise ValueError(f"{path}: outcome label {y[bad]} at row {bad + 2} below 1")
    K = int(y.max())
    if T is not None and T.shape[1] not in (0, K):
        raise ValueError(
            f"{path}: found {T.shape[1]} truth columns but K={K}"
        )
    if K < 2:
        raise ValueError(f"{path}: outcome has fewer than 2 categories")
    ds = Dataset(X, y, K, tuple(pred_cols))
    return ds, (T if T is not None and T.size else None)


def write_dataset(path, dataset, truth=None, truth_prefix="truth_"):
    """Write a Dataset (and optional true-risk matrix) as CSV."""
    header = list(dataset.column_names) + ["y"]
    if truth is not None:
        header += [f"{truth_prefix}{k + 1}" for k in range(truth.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.predictors[i]]
            row.append(str(int(dataset.outcomes[i])))
            if truth is not None:
                row += [repr(float(v)) for v in truth[i]]
            writer.writerow(row)
