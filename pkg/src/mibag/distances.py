"""Bag-level distance functions and distance-matrix construction.

Two families: the weighted-average distance (Euclidean distance between
weight-aggregated bag embeddings) and Hausdorff-style set distances built
from inner {max,mean,min}-of-min reductions with an optional symmetrizing
outer aggregation.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .bagstore import Bag, DataError, Dataset

if TYPE_CHECKING:  # avoids a cycle: weights builds on pairwise_distances below
    from .weights import WeightVector

INNER_MODES = ("max_min", "mean_min", "min_min", "mean_mean")
OUTER_MODES = ("max", "mean", "none")
# Intrinsically symmetric inner reductions need no outer aggregation.
_SYMMETRIC_INNER = ("min_min", "mean_mean")


class EvalCounters:
    """Instrumentation for complexity contracts (not thread-safe)."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.instance_pair_evals = 0
        self.aggregate_norm_evals = 0


counters = EvalCounters()


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All Euclidean distances between rows of a and rows of b.

    Uses the ||x-y||^2 = ||x||^2 + ||y||^2 - 2 x.y expansion with float64
    accumulation; negative round-off is clamped before the square root.
    """
    same = a.shape == b.shape and (a is b or np.array_equal(a, b))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a2 = np.einsum("ij,ij->i", a, a)
    b2 = np.einsum("ij,ij->i", b, b)
    sq = a2[:, None] + b2[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    if same:
        # Self-pairs must be exactly zero; the expansion leaves round-off.
        np.fill_diagonal(sq, 0.0)
    counters.instance_pair_evals += a.shape[0] * b.shape[0]
    return np.sqrt(sq)


def _check_shared_dim(bag_i: Bag, bag_j: Bag) -> None:
    if bag_i.d != bag_j.d:
        raise DataError(f"dimension mismatch: {bag_i.id!r} D={bag_i.d}, {bag_j.id!r} D={bag_j.d}")


@dataclass(frozen=True)
class HausdorffVariant:
    """inner reduction over instance pairs + outer symmetrization."""

    inner: str
    outer: str = "none"

    def __post_init__(self):
        if self.inner not in INNER_MODES:
            raise DataError(f"unknown inner mode {self.inner!r}; expected one of {INNER_MODES}")
        if self.outer not in OUTER_MODES:
            raise DataError(f"unknown outer mode {self.outer!r}; expected one of {OUTER_MODES}")
        if self.outer == "none" and self.inner not in _SYMMETRIC_INNER:
            raise DataError(
                f"outer='none' is only valid for symmetric inner modes {_SYMMETRIC_INNER}, "
                f"got inner={self.inner!r}"
            )
        if self.outer != "none" and self.inner in _SYMMETRIC_INNER:
            raise DataError(f"inner={self.inner!r} is already symmetric; use outer='none'")

    def describe(self) -> str:
        return self.inner if self.outer == "none" else f"{self.inner}/{self.outer}"


#: The six formulations evaluated in the ablations, by conventional name.
NAMED_VARIANTS = {
    "maxh": HausdorffVariant("max_min", "max"),
    "maxh_avg": HausdorffVariant("max_min", "mean"),
    "minmin": HausdorffVariant("min_min", "none"),
    "avgavg": HausdorffVariant("mean_mean", "none"),
    "avgmin_max": HausdorffVariant("mean_min", "max"),
    "avgmin_mean": HausdorffVariant("mean_min", "mean"),
}


def aggregate(bag: Bag, alpha: WeightVector) -> np.ndarray:
    """Weight-averaged bag embedding: sum_m alpha_m * z_m."""
    if len(alpha.values) != bag.m:
        raise DataError(
            f"bag {bag.id!r}: weight length {len(alpha.values)} does not match M={bag.m}"
        )
    return alpha.values @ bag.embeddings.astype(np.float64)


def wa_distance(bag_i: Bag, alpha_i: WeightVector, bag_j: Bag, alpha_j: WeightVector) -> float:
    """Euclidean distance between the two weighted-average embeddings."""
    _check_shared_dim(bag_i, bag_j)
    diff = aggregate(bag_i, alpha_i) - aggregate(bag_j, alpha_j)
    counters.aggregate_norm_evals += 1
    return float(np.linalg.norm(diff))


def _inner_reduce(dists: np.ndarray, inner: str) -> float:
    if inner == "max_min":
        return float(dists.min(axis=1).max())
    if inner == "mean_min":
        return float(dists.min(axis=1).mean())
    if inner == "min_min":
        return float(dists.min())
    if inner == "mean_mean":
        return float(dists.mean())
    raise DataError(f"unknown inner mode {inner!r}")


def directed_hausdorff(bag_i: Bag, bag_j: Bag, inner: str = "max_min") -> float:
    """One-directional set distance from bag_i to bag_j."""
    if inner not in INNER_MODES:
        raise DataError(f"unknown inner mode {inner!r}; expected one of {INNER_MODES}")
    _check_shared_dim(bag_i, bag_j)
    dists = pairwise_distances(bag_i.embeddings, bag_j.embeddings)
    return _inner_reduce(dists, inner)


def hausdorff_distance(bag_i: Bag, bag_j: Bag, variant: HausdorffVariant) -> float:
    """Symmetric Hausdorff-family distance; the pairwise block is computed once."""
    _check_shared_dim(bag_i, bag_j)
    dists = pairwise_distances(bag_i.embeddings, bag_j.embeddings)
    if variant.outer == "none":
        return _inner_reduce(dists, variant.inner)
    forward = _inner_reduce(dists, variant.inner)
    backward = _inner_reduce(dists.T, variant.inner)
    if variant.outer == "max":
        return max(forward, backward)
    return 0.5 * (forward + backward)


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative N x N bag distance matrix with zero diagonal."""

    values: np.ndarray
    measure: str
    ids: tuple[str, ...]

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        n = vals.shape[0]
        if vals.ndim != 2 or vals.shape != (n, n):
            raise DataError(f"distance matrix must be square, got shape {vals.shape}")
        if len(self.ids) != n:
            raise DataError(f"{len(self.ids)} ids for a {n}x{n} matrix")
        if not np.all(np.isfinite(vals)):
            raise DataError("distance matrix contains non-finite values")
        if np.any(vals < 0):
            raise DataError("distance matrix contains negative values")
        if np.any(np.diag(vals) != 0.0):
            raise DataError("distance matrix diagonal must be exactly zero")
        if np.abs(vals - vals.T).max() > 1e-9 * max(1.0, np.abs(vals).max()):
            raise DataError("distance matrix is not symmetric")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        lines = [",".join(self.ids)]
        for row in self.values:
            lines.append(",".join(repr(float(v)) for v in row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, measure: str = "imported") -> "DistanceMatrix":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty distance matrix CSV")
        ids = tuple(lines[0].split(","))
        rows = [[float(tok) for tok in ln.split(",")] for ln in lines[1:]]
        return cls(values=np.array(rows, dtype=np.float64), measure=measure, ids=ids)


def max_threads() -> int:
    env = os.environ.get("MIBAG_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _fill_pairs(n: int, compute, threads: int) -> np.ndarray:
    """Evaluate `compute(i, j)` once per unordered pair, row-major upper triangle."""
    values = np.zeros((n, n), dtype=np.float64)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def work(pair):
        i, j = pair
        values[i, j] = compute(i, j)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, pairs))
    else:
        for pair in pairs:
            work(pair)
    values += values.T
    return values


def wa_distance_matrix(
    dataset: Dataset, weights: list[WeightVector], threads: int | None = None
) -> DistanceMatrix:
    """Weighted-average distance matrix: aggregate each bag once, then pairwise norms."""
    if len(weights) != dataset.n:
        raise DataError(f"{len(weights)} weight vectors for {dataset.n} bags")
    for bag, alpha in zip(dataset.bags, weights):
        if alpha.bag_id and alpha.bag_id != bag.id:
            raise DataError(f"weight vector {alpha.bag_id!r} paired with bag {bag.id!r}")
    agg = np.stack([aggregate(bag, alpha) for bag, alpha in zip(dataset.bags, weights)])

    def compute(i, j):
        counters.aggregate_norm_evals += 1
        return float(np.linalg.norm(agg[i] - agg[j]))

    threads = max_threads() if threads is None else threads
    values = _fill_pairs(dataset.n, compute, threads)
    return DistanceMatrix(values=values, measure="wa", ids=tuple(dataset.ids))


def hausdorff_distance_matrix(
    dataset: Dataset, variant: HausdorffVariant, threads: int | None = None
) -> DistanceMatrix:
    bags = dataset.bags

    def compute(i, j):
        return hausdorff_distance(bags[i], bags[j], variant)

    threads = max_threads() if threads is None else threads
    values = _fill_pairs(dataset.n, compute, threads)
    return DistanceMatrix(
        values=values, measure=f"hausdorff:{variant.describe()}", ids=tuple(dataset.ids)
    )


def distance_matrix(
    dataset: Dataset,
    measure: str,
    weights: list[WeightVector] | None = None,
    variant: HausdorffVariant | None = None,
    threads: int | None = None,
) -> DistanceMatrix:
    """Build the N x N matrix for measure 'wa' (requires weights) or 'hausdorff'."""
    if measure == "wa":
        if weights is None:
            raise DataError("measure 'wa' requires a weight vector per bag")
        return wa_distance_matrix(dataset, weights, threads=threads)
    if measure == "hausdorff":
        if variant is None:
            raise DataError("measure 'hausdorff' requires a variant")
        return hausdorff_distance_matrix(dataset, variant, threads=threads)
    raise DataError(f"unknown measure {measure!r}; expected 'wa' or 'hausdorff'")
