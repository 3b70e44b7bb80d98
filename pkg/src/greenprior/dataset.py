"""Feature tables built from aligned stacks, plus correlation-based pruning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyTable, TooFewRows, UnknownFeature
from .raster import Stack


@dataclass(frozen=True)
class LabeledPoint:
    x: float
    y: float
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class FeatureTable:
    """Rows of named features with optional binary labels.

    Class 0 marks vegetated samples, class 1 non-vegetated.  ``provenance``
    holds the flat cell index (pixel tables) or the input point index
    (sample tables) of each row.
    """

    feature_names: list[str]
    X: np.ndarray
    labels: np.ndarray | None = None
    provenance: np.ndarray | None = None
    drops: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.feature_names = list(self.feature_names)
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(-1, len(self.feature_names))
        if X.shape[1] != len(self.feature_names):
            raise DataError(f"{X.shape[1]} columns for {len(self.feature_names)} feature names")
        self.X = X
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_rows,):
                raise DataError("labels must have exactly one entry per row")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must be 0 or 1")
        if self.provenance is None:
            self.provenance = np.arange(self.n_rows)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def subset(self, rows) -> "FeatureTable":
        rows = np.asarray(rows)
        return FeatureTable(
            self.feature_names,
            self.X[rows],
            None if self.labels is None else self.labels[rows],
            self.provenance[rows],
        )


def stack_to_table(stack: Stack) -> FeatureTable:
    valid = stack.valid_mask().ravel()
    if not valid.any():
        raise EmptyTable("no cell is valid in every layer")
    cells = np.nonzero(valid)[0]
    X = np.column_stack([g.values.ravel()[cells] for g in stack.layers])
    return FeatureTable(stack.names, X, None, cells, {"incomplete_cells": int((~valid).sum())})


def extract_samples(stack: Stack, points: Sequence[LabeledPoint]) -> FeatureTable:
    """Labelled rows at the cells containing each point.

    Points outside the grid or on a cell with nodata in any layer are
    dropped; the counts land in ``table.drops``.
    """
    geo = stack.georef
    x = np.array([p.x for p in points], dtype=float)
    y = np.array([p.y for p in points], dtype=float)
    labels = np.array([p.label for p in points], dtype=np.int64)
    row, col, inside = geo.cell_of(x, y)
    valid = stack.valid_mask()[row, col] if len(points) else np.zeros(0, dtype=bool)
    keep = inside & valid
    drops = {"outside_extent": int((~inside).sum()), "nodata": int((inside & ~valid).sum())}
    if not keep.any():
        raise EmptyTable(f"no sample point falls on a complete cell ({drops})")
    X = np.column_stack([g.values[row[keep], col[keep]] for g in stack.layers])
    return FeatureTable(stack.names, X, labels[keep], np.nonzero(keep)[0], drops)


@dataclass
class Correlation:
    names: list[str]
    r: np.ndarray
    zero_variance: np.ndarray


def correlation_matrix(table: FeatureTable) -> Correlation:
    """Pearson correlation with population denominators.

    Zero-variance columns get ``r = 0`` off the diagonal and are flagged.
    """
    if table.n_rows < 2:
        raise TooFewRows(f"correlation needs at least 2 rows, got {table.n_rows}")
    X = table.X
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / X.shape[0]
    sd = np.sqrt(np.diag(cov))
    zero = sd == 0
    safe = np.where(zero, 1.0, sd)
    r = cov / np.outer(safe, safe)
    r[zero, :] = 0.0
    r[:, zero] = 0.0
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return Correlation(list(table.feature_names), r, zero)


def prune_correlated(table: FeatureTable, threshold: float = 0.90) -> tuple[list[str], list[str]]:
    """Greedily drop one member of every feature pair with ``|r| > threshold``.

    Pairs are visited by descending ``|r|`` (ties by name pair).  From each
    pair whose members are both still alive, the member with the larger mean
    ``|r|`` against the other live features is dropped; equal means drop the
    later column.  Zero-variance features are removed before anything else.
    """
    corr = correlation_matrix(table)
    a = np.abs(corr.r)
    names = corr.names
    p = len(names)
    alive = ~corr.zero_variance.copy()
    dropped = [names[i] for i in range(p) if corr.zero_variance[i]]

    def mean_abs(i: int) -> float:
        others = alive.copy()
        others[i] = False
        return float(a[i, others].mean()) if others.any() else 0.0

    while True:
        iu, ju = np.triu_indices(p, k=1)
        live = alive[iu] & alive[ju] & (a[iu, ju] > threshold)
        if not live.any():
            break
        pairs = sorted(
            zip(iu[live].tolist(), ju[live].tolist()),
            key=lambda ij: (-a[ij[0], ij[1]], tuple(sorted((names[ij[0]], names[ij[1]])))),
        )
        for i, j in pairs:
            if not (alive[i] and alive[j]):
                continue
            mi, mj = mean_abs(i), mean_abs(j)
            loser = i if mi > mj else j
            alive[loser] = False
            dropped.append(names[loser])
    kept = [names[i] for i in range(p) if alive[i]]
    return kept, dropped


def drop_features(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    unknown = [n for n in names if n not in table.feature_names]
    if unknown:
        raise UnknownFeature(f"unknown features: {unknown}")
    keep = [i for i, n in enumerate(table.feature_names) if n not in set(names)]
    return FeatureTable(
        [table.feature_names[i] for i in keep],
        table.X[:, keep],
        None if table.labels is None else table.labels.copy(),
        table.provenance.copy(),
        dict(table.drops),
    )


def select_features(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    unknown = [n for n in names if n not in table.feature_names]
    if unknown:
        raise UnknownFeature(f"unknown features: {unknown}")
    idx = [table.feature_names.index(n) for n in names]
    return FeatureTable(list(names), table.X[:, idx], table.labels, table.provenance, dict(table.drops))


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices for a per-class shuffled train/test split."""
    rng = np.random.default_rng([int(seed), 0x5A17])
    train, test = [], []
    for c in (0, 1):
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
