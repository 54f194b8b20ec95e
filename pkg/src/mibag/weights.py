"""Per-bag instance weight vectors.

A weight vector alpha lives on the simplex over a bag's M instances and
says how much each patch contributes to the bag's aggregated embedding.
Weights can be uniform, softmax over discriminativeness scores (computed
against the rest of the dataset or against pooled labeled-normal
instances), hard top-k, a combination of both, derived from ground-truth
masks, or the one-hot pair that reproduces the directed max-min Hausdorff
distance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .bagstore import Bag, DataError, Dataset
from .distances import pairwise_distances

AGGREGATORS = ("mean", "max", "min")
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class WeightVector:
    """Simplex-constrained instance weights for one bag."""

    values: np.ndarray
    bag_id: str = ""
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise DataError(f"weights for {self.bag_id!r} must be a nonempty vector")
        if not np.all(np.isfinite(vals)):
            raise DataError(f"weights for {self.bag_id!r} contain non-finite values")
        if np.any(vals < 0):
            raise DataError(f"weights for {self.bag_id!r} contain negative values")
        if abs(vals.sum() - 1.0) > SIMPLEX_TOL:
            raise DataError(f"weights for {self.bag_id!r} sum to {vals.sum()!r}, not 1")
        if self.grid is not None and self.grid[0] * self.grid[1] != vals.size:
            raise DataError(f"weights for {self.bag_id!r}: grid {self.grid} != length {vals.size}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class WeightConfig:
    """Knobs for score-based weights.

    tau is the softmax temperature (small tau concentrates mass on the
    highest-scoring instances); k restricts to the top-k instances;
    subsample_size bounds how many other bags each bag is scored against.
    """

    tau: float = 0.1
    k: int | None = None
    subsample_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise DataError(f"tau must be positive, got {self.tau}")
        if self.k is not None and self.k < 1:
            raise DataError(f"k must be a positive integer, got {self.k}")
        if self.subsample_size is not None and self.subsample_size < 1:
            raise DataError(f"subsample_size must be a positive integer, got {self.subsample_size}")
        if self.seed < 0:
            raise DataError(f"seed must be a nonnegative 64-bit integer, got {self.seed}")


def softmax(scores: np.ndarray, tau: float) -> np.ndarray:
    """exp((s - max s)/tau), normalized; max-subtraction keeps small tau finite."""
    scores = np.asarray(scores, dtype=np.float64)
    if not tau > 0:
        raise DataError(f"tau must be positive, got {tau}")
    e = np.exp((scores - scores.max()) / tau)
    return e / e.sum()


def uniform_weights(bag: Bag) -> WeightVector:
    return WeightVector(np.full(bag.m, 1.0 / bag.m), bag_id=bag.id, grid=bag.grid)


def min_distance_profile(bag_i: Bag, bag_j: Bag) -> np.ndarray:
    """For each instance of bag_i, the distance to its nearest instance in bag_j."""
    if bag_i.d != bag_j.d:
        raise DataError(f"dimension mismatch: {bag_i.id!r} vs {bag_j.id!r}")
    return pairwise_distances(bag_i.embeddings, bag_j.embeddings).min(axis=1)


def _profile_against(bag: Bag, others: list[Bag]) -> np.ndarray:
    """Stack of min-distance profiles of `bag` against each bag in `others`.

    One pairwise block against the concatenated instances, then a
    segment-wise min; identical input order gives bitwise-identical output.
    """
    sizes = [b.m for b in others]
    stacked = np.concatenate([b.embeddings for b in others], axis=0)
    block = pairwise_distances(bag.embeddings, stacked)
    starts = np.cumsum([0] + sizes[:-1])
    return np.minimum.reduceat(block, starts, axis=1)  # (M_i, len(others))


def _aggregate_profiles(profiles: np.ndarray, aggregator: str) -> np.ndarray:
    if aggregator == "mean":
        return profiles.mean(axis=1)
    if aggregator == "max":
        return profiles.max(axis=1)
    if aggregator == "min":
        return profiles.min(axis=1)
    raise DataError(f"unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}")


def _other_indices(n: int, i: int, cfg: WeightConfig) -> np.ndarray:
    all_others = np.delete(np.arange(n), i)
    if cfg.subsample_size is None:
        return all_others
    if cfg.subsample_size > n - 1:
        raise DataError(f"subsample_size {cfg.subsample_size} exceeds N-1 = {n - 1}")
    # Keyed by (seed, bag index) so results do not depend on execution order;
    # sorting makes a full-size draw coincide with the non-subsampled path.
    rng = np.random.default_rng([cfg.seed, i])
    drawn = rng.choice(all_others, size=cfg.subsample_size, replace=False)
    return np.sort(drawn)


def unsup_scores(
    dataset: Dataset, cfg: WeightConfig | None = None, aggregator: str = "mean"
) -> list[np.ndarray]:
    """Per-bag instance scores: aggregated nearest-instance distance to other bags."""
    cfg = cfg or WeightConfig()
    if dataset.n < 2:
        raise DataError("unsupervised scores need at least two bags")
    if aggregator not in AGGREGATORS:
        raise DataError(f"unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}")
    scores = []
    for i, bag in enumerate(dataset.bags):
        idx = _other_indices(dataset.n, i, cfg)
        profiles = _profile_against(bag, [dataset.bags[j] for j in idx])
        scores.append(_aggregate_profiles(profiles, aggregator))
    return scores


def unsup_soft_weights(
    dataset: Dataset, cfg: WeightConfig | None = None, aggregator: str = "mean"
) -> list[WeightVector]:
    """Softmax weights from unsupervised scores; instances common across the
    dataset score low and get down-weighted."""
    cfg = cfg or WeightConfig()
    return [
        WeightVector(softmax(s, cfg.tau), bag_id=bag.id, grid=bag.grid)
        for bag, s in zip(dataset.bags, unsup_scores(dataset, cfg, aggregator))
    ]


def semi_scores(dataset: Dataset) -> list[np.ndarray]:
    """Per-instance distance to the nearest instance in the pooled reference bags."""
    if not dataset.reference_bags:
        raise DataError("semi-supervised weights require reference_bags")
    pooled = np.concatenate([b.embeddings for b in dataset.reference_bags], axis=0)
    return [
        pairwise_distances(bag.embeddings, pooled).min(axis=1) for bag in dataset.bags
    ]


def semi_soft_weights(dataset: Dataset, cfg: WeightConfig | None = None) -> list[WeightVector]:
    cfg = cfg or WeightConfig()
    return [
        WeightVector(softmax(s, cfg.tau), bag_id=bag.id, grid=bag.grid)
        for bag, s in zip(dataset.bags, semi_scores(dataset))
    ]


def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on negated scores: ties resolve to the lowest index.
    return np.argsort(-scores, kind="stable")[:k]


def hard_topk_weights(
    scores: np.ndarray, k: int, bag_id: str = "", grid: tuple[int, int] | None = None
) -> WeightVector:
    """1/k on the k highest-scoring instances, 0 elsewhere."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise DataError(f"k={k} out of range for {scores.size} instances")
    vals = np.zeros(scores.size)
    vals[_topk_indices(scores, k)] = 1.0 / k
    return WeightVector(vals, bag_id=bag_id, grid=grid)


def combined_topk_soft_weights(
    scores: np.ndarray,
    tau: float,
    k: int,
    bag_id: str = "",
    grid: tuple[int, int] | None = None,
) -> WeightVector:
    """Softmax over the top-k scores only; everything else gets exactly 0."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise DataError(f"k={k} out of range for {scores.size} instances")
    idx = np.sort(_topk_indices(scores, k))
    vals = np.zeros(scores.size)
    vals[idx] = softmax(scores[idx], tau)
    return WeightVector(vals, bag_id=bag_id, grid=grid)


def mask_weights(resized_mask: np.ndarray, bag_id: str = "") -> WeightVector:
    """Normalize a grid-resized mask to sum 1; an all-zero mask falls back to uniform."""
    mask = np.asarray(resized_mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DataError(f"resized mask must be 2-D, got shape {mask.shape}")
    if np.any(mask < 0):
        raise DataError("resized mask has negative cells")
    flat = mask.reshape(-1)
    total = flat.sum()
    if total == 0.0:
        vals = np.full(flat.size, 1.0 / flat.size)
    else:
        vals = flat / total
    return WeightVector(vals, bag_id=bag_id, grid=(mask.shape[0], mask.shape[1]))


def maxh_onehot_weights(bag_i: Bag, bag_j: Bag) -> tuple[WeightVector, WeightVector]:
    """The one-hot weight pair whose weighted-average distance equals the
    directed max-min Hausdorff distance from bag_i to bag_j.

    Ties in the arg-max/arg-min resolve to the lowest index.
    """
    if bag_i.d != bag_j.d:
        raise DataError(f"dimension mismatch: {bag_i.id!r} vs {bag_j.id!r}")
    dists = pairwise_distances(bag_i.embeddings, bag_j.embeddings)
    m_star = int(np.argmax(dists.min(axis=1)))
    n_star = int(np.argmin(dists[m_star]))
    alpha_i = np.zeros(bag_i.m)
    alpha_i[m_star] = 1.0
    alpha_j = np.zeros(bag_j.m)
    alpha_j[n_star] = 1.0
    return (
        WeightVector(alpha_i, bag_id=bag_i.id, grid=bag_i.grid),
        WeightVector(alpha_j, bag_id=bag_j.id, grid=bag_j.grid),
    )


# ---------------------------------------------------------------------------
# Export

def weights_to_json(weights: list[WeightVector], path) -> None:
    payload = {w.bag_id: [float(v) for v in w.values] for w in weights}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def weights_from_json(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return {bag_id: np.asarray(vals, dtype=np.float64) for bag_id, vals in payload.items()}


def weights_to_csv(weights: list[WeightVector], path) -> None:
    """Long-format CSV (bag_id, index, weight) for external heat-map tooling."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "index", "weight"])
        for w in weights:
            for idx, val in enumerate(w.values):
                writer.writerow([w.bag_id, idx, repr(float(val))])
