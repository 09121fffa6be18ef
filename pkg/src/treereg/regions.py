"""Region covers of input space: ordered boxes or k-means centroids."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError, UncoveredInputError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RegionSpec:
    """Either ``kind="rectangles"`` with ``lows``/``highs`` (boxes x ids) or
    ``kind="kmeans"`` with ``centroids``.

    Boxes are closed on both sides and checked in order; the first match wins.
    """

    kind: str
    centroids: np.ndarray | None = None
    lows: np.ndarray | None = None
    highs: np.ndarray | None = None
    box_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "kmeans":
            c = np.asarray(self.centroids, dtype=float)
            if c.ndim != 2 or len(c) < 1:
                raise InvalidInputError("kmeans spec needs a k x P centroid matrix")
            if len(np.unique(c, axis=0)) != len(c):
                raise InvalidInputError("centroids must be pairwise distinct")
        elif self.kind == "rectangles":
            lo = np.asarray(self.lows, dtype=float)
            hi = np.asarray(self.highs, dtype=float)
            if lo.shape != hi.shape or lo.ndim != 2 or len(lo) < 1:
                raise InvalidInputError("rectangle spec needs matching box bound matrices")
            if self.box_ids is None or len(self.box_ids) != len(lo):
                raise InvalidInputError("every box needs a region id")
        else:
            raise InvalidInputError(f"unknown region kind {self.kind!r}")

    @property
    def n_regions(self) -> int:
        if self.kind == "kmeans":
            return len(self.centroids)
        return int(np.max(self.box_ids)) + 1

    @property
    def n_features(self) -> int:
        return (self.centroids if self.kind == "kmeans" else self.lows).shape[1]

    def assign_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got shape {X.shape}")
        if self.kind == "kmeans":
            d2 = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
            # argmin returns the first minimum, i.e. the lowest centroid index
            return np.argmin(d2, axis=1)
        inside = np.all((X[:, None, :] >= self.lows[None]) & (X[:, None, :] <= self.highs[None]),
                        axis=2)
        covered = inside.any(axis=1)
        if not covered.all():
            bad = X[~covered][0]
            raise UncoveredInputError(f"input {bad.tolist()} lies in no region box")
        return np.asarray(self.box_ids)[np.argmax(inside, axis=1)]

    def to_dict(self) -> dict:
        if self.kind == "kmeans":
            return {"kind": "kmeans", "centroids": self.centroids.tolist()}
        return {
            "kind": "rectangles",
            "boxes": [
                {"low": _bounds_out(lo), "high": _bounds_out(hi), "region": int(r)}
                for lo, hi, r in zip(self.lows, self.highs, self.box_ids)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        if d["kind"] == "kmeans":
            return kmeans_spec(d["centroids"])
        boxes = d["boxes"]
        return rectangles_spec([_bounds_in(b["low"], -np.inf) for b in boxes],
                               [_bounds_in(b["high"], np.inf) for b in boxes],
                               [b["region"] for b in boxes])


# unbounded box sides travel as JSON null
def _bounds_out(v) -> list:
    return [None if np.isinf(a) else float(a) for a in v]


def _bounds_in(v, fill: float) -> list:
    return [fill if a is None else float(a) for a in v]


def kmeans_spec(centroids) -> RegionSpec:
    return RegionSpec("kmeans", centroids=np.asarray(centroids, dtype=float))


def rectangles_spec(lows, highs, ids=None) -> RegionSpec:
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    ids = np.arange(len(lows)) if ids is None else np.asarray(ids, dtype=np.int64)
    return RegionSpec("rectangles", lows=lows, highs=highs, box_ids=ids)


def single_region(n_features: int) -> RegionSpec:
    """One catch-all box: global treatment."""
    return rectangles_spec([[-np.inf] * n_features], [[np.inf] * n_features])


def assign(spec: RegionSpec, x) -> int:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("assign takes a single input vector")
    return int(spec.assign_many(x[None, :])[0])


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def kmeans_regions(X, k: int, seed: int, max_iter: int = 300, tol: float = 1e-6) -> RegionSpec:
    """Lloyd iterations from a seeded k-means++ start."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise InvalidInputError("kmeans needs a nonempty 2-D matrix")
    if not (1 <= k <= len(X)):
        raise InvalidInputError(f"need 1 <= k <= N, got k={k}, N={len(X)}")
    if len(np.unique(X, axis=0)) < k:
        raise InvalidInputError("fewer distinct points than clusters")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(X, k, rng)
    for _ in range(max_iter):
        labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        new = centers.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = np.argmax(((X - centers[labels]) ** 2).sum(axis=1))
                new[j] = X[far]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    return kmeans_spec(centers)


def partition(X, spec: RegionSpec) -> list[np.ndarray]:
    """Index arrays per region id; empty regions are kept (and logged)."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise InvalidInputError("cannot partition an empty dataset")
    ids = spec.assign_many(X)
    parts = [np.flatnonzero(ids == r) for r in range(spec.n_regions)]
    empty = [r for r, p in enumerate(parts) if len(p) == 0]
    if empty:
        log.warning("regions %s contain no points", empty)
    return parts


def save_spec(spec: RegionSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)


def load_spec(path) -> RegionSpec:
    with open(path) as fh:
        return RegionSpec.from_dict(json.load(fh))
