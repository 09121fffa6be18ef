"""Toy generators and delimited-file ingestion."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import IngestionError, InvalidInputError, ShapeError
from .regions import RegionSpec, rectangles_spec


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    split: str = "train"
    region_ids: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or len(X) != len(Y):
            raise ShapeError(f"X {X.shape} and Y {Y.shape} do not line up")
        if not np.all((Y == 0) | (Y == 1)):
            raise InvalidInputError("labels must be 0/1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y.astype(np.int64))

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.Y.shape[1]

    def with_regions(self, spec: RegionSpec) -> "Dataset":
        return replace(self, region_ids=spec.assign_many(self.X))

    def subset(self, idx) -> "Dataset":
        rid = None if self.region_ids is None else self.region_ids[idx]
        return Dataset(self.X[idx], self.Y[idx], self.split, rid)


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


# five-rectangle defaults: vertical bands whose horizontal cut alternates low/high
BAND_THRESHOLDS = (0.35, 0.65, 0.35, 0.65, 0.35)


def band_spec(edges) -> RegionSpec:
    """Vertical bands along feature 0; outer bands extend to infinity."""
    edges = list(edges)
    lows = [[-np.inf if i == 0 else edges[i], -np.inf] for i in range(len(edges) - 1)]
    highs = [[np.inf if i == len(edges) - 2 else edges[i + 1], np.inf]
             for i in range(len(edges) - 1)]
    return rectangles_spec(lows, highs)


def _flip(y: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(len(y)) < rate
    return np.where(flips, 1 - y, y)


def _check_noise(label_noise: float) -> None:
    if not (0.0 <= label_noise < 0.5):
        raise InvalidInputError("label_noise must be in [0, 0.5)")


def five_rectangles_labels(X, thresholds=BAND_THRESHOLDS) -> np.ndarray:
    n_bands = len(thresholds)
    band = np.clip((X[:, 0] * n_bands).astype(int), 0, n_bands - 1)
    return (X[:, 1] > np.asarray(thresholds)[band]).astype(np.int64)


def gen_five_rectangles(n_train: int = 250, n_test: int = 5000, label_noise: float = 0.1,
                        seed: int = 0, thresholds=BAND_THRESHOLDS, n_val: int = 0):
    """Returns ``(train, test, spec)``; with ``n_val > 0`` also a noisy validation set
    as a fourth element."""
    if n_train < 10 or n_test < 10:
        raise InvalidInputError("n_train and n_test must be at least 10")
    _check_noise(label_noise)
    rng = np.random.default_rng(seed)
    Xtr = rng.random((n_train, 2))
    Xte = rng.random((n_test, 2))
    ytr = _flip(five_rectangles_labels(Xtr, thresholds), label_noise, rng)
    yte = five_rectangles_labels(Xte, thresholds)
    spec = band_spec(np.linspace(0.0, 1.0, len(thresholds) + 1))
    out = [Dataset(Xtr, ytr, "train").with_regions(spec), Dataset(Xte, yte, "test").with_regions(spec),
           spec]
    if n_val:
        Xva = rng.random((n_val, 2))
        yva = _flip(five_rectangles_labels(Xva, thresholds), label_noise, rng)
        out.append(Dataset(Xva, yva, "validation").with_regions(spec))
    return tuple(out)


def two_region_labels(X) -> np.ndarray:
    # left half: one horizontal cut; right half: a two-period wave
    left = X[:, 1] > 0.5
    right = X[:, 1] > 0.5 + 0.3 * np.sin(4.0 * np.pi * (X[:, 0] - 0.5))
    return np.where(X[:, 0] <= 0.5, left, right).astype(np.int64)


def gen_two_region_toy(seed: int = 0, n_train: int = 250, n_test: int = 5000,
                       label_noise: float = 0.1, n_val: int = 0):
    """Two halves split at x0 = 0.5 with a simple and a wiggly boundary."""
    _check_noise(label_noise)
    rng = np.random.default_rng(seed)
    Xtr = rng.random((n_train, 2))
    Xte = rng.random((n_test, 2))
    ytr = _flip(two_region_labels(Xtr), label_noise, rng)
    yte = two_region_labels(Xte)
    spec = band_spec([0.0, 0.5, 1.0])
    out = [Dataset(Xtr, ytr, "train").with_regions(spec), Dataset(Xte, yte, "test").with_regions(spec),
           spec]
    if n_val:
        Xva = rng.random((n_val, 2))
        yva = _flip(two_region_labels(Xva), label_noise, rng)
        out.append(Dataset(Xva, yva, "validation").with_regions(spec))
    return tuple(out)


def grid_spec(rows: int, cols: int) -> RegionSpec:
    lows, highs = [], []
    for r in range(rows):
        for c in range(cols):
            lows.append([-np.inf if c == 0 else c / cols, -np.inf if r == 0 else r / rows])
            highs.append([np.inf if c == cols - 1 else (c + 1) / cols,
                          np.inf if r == rows - 1 else (r + 1) / rows])
    return rectangles_spec(lows, highs)


def gen_grid_toy(rows: int = 5, cols: int = 5, seed: int = 0, n_train: int = 1000,
                 n_test: int = 5000, label_noise: float = 0.1, n_val: int = 0):
    """rows x cols cells, each cut by its own axis-aligned boundary.

    Cell orientation and cut position come from ``seed``.
    """
    if rows * cols < 1:
        raise InvalidInputError("grid needs at least one cell")
    _check_noise(label_noise)
    rng = np.random.default_rng(seed)
    n_cells = rows * cols
    axis = rng.integers(0, 2, n_cells)
    offset = rng.uniform(0.25, 0.75, n_cells)
    spec = grid_spec(rows, cols)

    def labels(X):
        cell = spec.assign_many(X)
        c = cell % cols
        r = cell // cols
        # position inside the cell, in [0, 1]
        u = np.clip(X[:, 0] * cols - c, 0, 1)
        v = np.clip(X[:, 1] * rows - r, 0, 1)
        coord = np.where(axis[cell] == 0, u, v)
        return (coord > offset[cell]).astype(np.int64)

    Xtr = rng.random((n_train, 2))
    Xte = rng.random((n_test, 2))
    ytr = _flip(labels(Xtr), label_noise, rng)
    out = [Dataset(Xtr, ytr, "train").with_regions(spec),
           Dataset(Xte, labels(Xte), "test").with_regions(spec), spec]
    if n_val:
        Xva = rng.random((n_val, 2))
        out.append(Dataset(Xva, _flip(labels(Xva), label_noise, rng), "validation").with_regions(spec))
    return tuple(out)


def load_delimited(path, label_columns, standardize: bool = True, categorical_columns=(),
                   seed: int = 0) -> Splits:
    """Read a headed CSV, one-hot encode categoricals, split 70/10/20 by seeded shuffle.

    Standardization statistics come from the training split only.
    """
    if not os.path.exists(path):
        raise IngestionError(f"no such file: {path}")
    try:
        df = pd.read_csv(path)
    except Exception as exc:  # pandas raises a zoo of parser errors
        raise IngestionError(f"could not parse {path}: {exc}") from exc
    label_columns = [label_columns] if isinstance(label_columns, str) else list(label_columns)
    missing = [c for c in label_columns if c not in df.columns]
    if missing:
        raise IngestionError(f"unknown label column(s) {missing}; header has {list(df.columns)}")
    unknown_cat = [c for c in categorical_columns if c not in df.columns]
    if unknown_cat:
        raise IngestionError(f"unknown categorical column(s) {unknown_cat}")
    Y = df[label_columns]
    if not Y.isin([0, 1]).all().all():
        raise IngestionError("label columns must contain only 0/1")
    feats = df.drop(columns=label_columns)
    if categorical_columns:
        feats = pd.get_dummies(feats, columns=list(categorical_columns), dtype=float)
    try:
        X = feats.astype(float).to_numpy()
    except (TypeError, ValueError) as exc:
        bad = [c for c in feats.columns if not pd.api.types.is_numeric_dtype(feats[c])]
        raise IngestionError(f"non-numeric feature column(s) {bad}; declare them categorical") from exc
    if np.isnan(X).any():
        raise IngestionError("feature matrix contains missing values")
    Y = Y.to_numpy().astype(np.int64)

    n = len(X)
    perm = np.random.default_rng(seed).permutation(n)
    n_tr, n_va = int(np.floor(0.7 * n)), int(np.floor(0.1 * n))
    tr, va, te = perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :]
    if standardize and n_tr:
        mu = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
    return Splits(Dataset(X[tr], Y[tr], "train"), Dataset(X[va], Y[va], "validation"),
                  Dataset(X[te], Y[te], "test"))


def save_delimited(ds: Dataset, path, spec: RegionSpec | None = None) -> None:
    """Write features, labels and a trailing region-id column (when known)."""
    cols = {f"x{j}": ds.X[:, j] for j in range(ds.n_features)}
    cols.update({f"y{q}": ds.Y[:, q] for q in range(ds.n_outputs)})
    rid = ds.region_ids
    if rid is None and spec is not None:
        rid = spec.assign_many(ds.X)
    if rid is not None:
        cols["region"] = rid
    pd.DataFrame(cols).to_csv(path, index=False)


def read_exported(path) -> Dataset:
    """Inverse of :func:`save_delimited`."""
    df = pd.read_csv(path)
    xs = [c for c in df.columns if c.startswith("x")]
    ys = [c for c in df.columns if c.startswith("y")]
    rid = df["region"].to_numpy() if "region" in df.columns else None
    return Dataset(df[xs].to_numpy(float), df[ys].to_numpy(), "train", rid)
