"""Clustering evaluation: Hungarian-matched NMI/ARI/F1, over-clustering
purity curves with their area/reduction summaries, and pixel-level
localization AUC from weight maps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .bagstore import DataError, MaskSet
from .clusterers import ClusterAssignment, ClusterConfig, cluster_distance_matrix, \
    cut_merges, linkage_merges, LINKAGES
from .distances import DistanceMatrix
from .weights import WeightVector


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment; rectangular inputs are padded square with a
    large constant and pad pairs dropped from the result."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DataError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DataError("cost matrix contains non-finite entries")
    rows, cols = cost.shape
    size = max(rows, cols)
    if rows != cols:
        pad_value = float(np.abs(cost).max() if cost.size else 0.0) * size + 1.0
        padded = np.full((size, size), pad_value)
        padded[:rows, :cols] = cost
    else:
        padded = cost
    row_ind, col_ind = linear_sum_assignment(padded)
    return [(int(r), int(c)) for r, c in zip(row_ind, col_ind) if r < rows and c < cols]


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    row_labels: tuple[str, ...]
    col_labels: tuple[int, ...]

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise DataError("contingency counts must be a matrix")
        if np.any(counts < 0):
            raise DataError("contingency counts must be nonnegative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "col_labels", tuple(self.col_labels))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def contingency(
    truth: list[str | None], pred: ClusterAssignment, exclude: set[str] | None = None
) -> ContingencyTable:
    """Count table of (true label x predicted cluster) after dropping excluded labels."""
    exclude = exclude or set()
    labels = np.asarray(pred.labels)
    if len(truth) != labels.size:
        raise DataError(f"{len(truth)} truth labels for {labels.size} predictions")
    kept_truth = []
    kept_pred = []
    for t, p in zip(truth, labels):
        if t is None:
            raise DataError("unlabeled bag encountered during evaluation")
        if t in exclude:
            continue
        kept_truth.append(t)
        kept_pred.append(int(p))
    if not kept_truth:
        raise DataError("no bags left to evaluate after exclusion")
    row_labels = tuple(sorted(set(kept_truth)))
    col_labels = tuple(sorted(set(kept_pred)))
    row_index = {lab: i for i, lab in enumerate(row_labels)}
    col_index = {lab: i for i, lab in enumerate(col_labels)}
    counts = np.zeros((len(row_labels), len(col_labels)), dtype=np.int64)
    for t, p in zip(kept_truth, kept_pred):
        counts[row_index[t], col_index[p]] += 1
    return ContingencyTable(counts=counts, row_labels=row_labels, col_labels=col_labels)


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _partitions_identical(counts: np.ndarray) -> bool:
    # Identical up to renaming: every row hits one column and vice versa.
    return bool(
        np.all((counts > 0).sum(axis=1) == 1) and np.all((counts > 0).sum(axis=0) == 1)
    )


def nmi(table: ContingencyTable, average: str = "geometric") -> float:
    """Mutual information normalized by the mean of the two label entropies.

    average 'geometric' (default) uses sqrt(H_t * H_p); 'arithmetic' uses
    (H_t + H_p)/2. Natural logarithms throughout.
    """
    if average not in ("geometric", "arithmetic"):
        raise DataError(f"unknown average {average!r}")
    counts = table.counts
    total = counts.sum()
    if total == 0:
        raise DataError("empty contingency table")
    h_true = _entropy(counts.sum(axis=1))
    h_pred = _entropy(counts.sum(axis=0))
    if h_true == 0.0 or h_pred == 0.0:
        return 1.0 if _partitions_identical(counts) else 0.0
    row = counts.sum(axis=1) / total
    col = counts.sum(axis=0) / total
    mi = 0.0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            if counts[i, j] > 0:
                pij = counts[i, j] / total
                mi += pij * math.log(pij / (row[i] * col[j]))
    norm = math.sqrt(h_true * h_pred) if average == "geometric" else 0.5 * (h_true + h_pred)
    return mi / norm


def ari(table: ContingencyTable) -> float:
    """Pair-counting Rand index adjusted for chance."""
    counts = table.counts
    n = counts.sum()
    if n == 0:
        raise DataError("empty contingency table")

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(counts).sum()
    sum_rows = comb2(counts.sum(axis=1)).sum()
    sum_cols = comb2(counts.sum(axis=0)).sum()
    expected = sum_rows * sum_cols / comb2(n) if n >= 2 else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0 if _partitions_identical(counts) else 0.0
    return float((index - expected) / (max_index - expected))


def _count_matching(counts: np.ndarray) -> list[tuple[int, int]]:
    """Max-total-count matching of true labels to clusters.

    Count ties are broken toward higher per-pair F1 with a bonus smaller
    than any count difference, so the resulting macro-F1 does not depend
    on how clusters happen to be numbered.
    """
    counts = counts.astype(np.float64)
    label_sizes = counts.sum(axis=1, keepdims=True)
    cluster_sizes = counts.sum(axis=0, keepdims=True)
    pair_f1 = 2.0 * counts / (label_sizes + cluster_sizes)
    bonus = pair_f1 / (max(counts.shape) + 1.0)
    return hungarian(-(counts + bonus))


def matched_f1(table: ContingencyTable, average: str = "macro") -> float:
    """F1 after matching true labels to clusters to maximize the matched count.

    'macro' (default) averages per-true-label F1 (unmatched labels score 0);
    'micro' pools counts, which reduces to matched accuracy.
    """
    if average not in ("macro", "micro"):
        raise DataError(f"unknown average {average!r}")
    counts = table.counts
    matching = _count_matching(counts)
    matched = {r: c for r, c in matching}
    label_sizes = counts.sum(axis=1)
    cluster_sizes = counts.sum(axis=0)
    if average == "micro":
        hit = sum(counts[r, c] for r, c in matching)
        return float(hit / counts.sum())
    f1s = []
    for r in range(counts.shape[0]):
        c = matched.get(r)
        if c is None or counts[r, c] == 0:
            f1s.append(0.0)
            continue
        precision = counts[r, c] / cluster_sizes[c]
        recall = counts[r, c] / label_sizes[r]
        f1s.append(2 * precision * recall / (precision + recall))
    return float(np.mean(f1s))


@dataclass(frozen=True)
class EvaluationReport:
    nmi: float
    ari: float
    f1: float
    matching: tuple[tuple[str, int], ...]
    excluded_labels: tuple[str, ...]
    n_evaluated: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "nmi": self.nmi,
            "ari": self.ari,
            "f1": self.f1,
            "matching": [[t, c] for t, c in self.matching],
            "excluded_labels": list(self.excluded_labels),
            "n_evaluated": self.n_evaluated,
            "config": self.config,
        }


def evaluate(
    truth: list[str | None],
    pred: ClusterAssignment,
    exclude: set[str] | None = None,
    config: dict | None = None,
    nmi_average: str = "geometric",
    f1_average: str = "macro",
) -> EvaluationReport:
    table = contingency(truth, pred, exclude)
    matching = _count_matching(table.counts)
    named = tuple(
        (table.row_labels[r], int(table.col_labels[c])) for r, c in sorted(matching)
    )
    return EvaluationReport(
        nmi=nmi(table, average=nmi_average),
        ari=ari(table),
        f1=matched_f1(table, average=f1_average),
        matching=named,
        excluded_labels=tuple(sorted(exclude)) if exclude else (),
        n_evaluated=table.total,
        config=config or {},
    )


# ---------------------------------------------------------------------------
# Purity over-clustering curves

def purity(truth: list[str], labels: np.ndarray) -> float:
    """Fraction of items belonging to their cluster's majority true label."""
    if len(truth) == 0:
        raise DataError("purity of an empty assignment")
    hits = 0
    for k in set(labels.tolist()):
        members = [t for t, lab in zip(truth, labels) if lab == k]
        counts = {}
        for t in members:
            counts[t] = counts.get(t, 0) + 1
        hits += max(counts.values())
    return hits / len(truth)


@dataclass(frozen=True)
class PurityCurve:
    points: tuple[tuple[int, float], ...]
    mauc: float
    r_at_p: dict[float, float]

    def to_dict(self) -> dict:
        return {
            "points": [[k, p] for k, p in self.points],
            "mauc": self.mauc,
            "r_at_p": {repr(thr): val for thr, val in self.r_at_p.items()},
        }

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["K", "purity"])
            for k, p in self.points:
                writer.writerow([k, repr(p)])


def purity_sweep(
    D: DistanceMatrix,
    truth: list[str | None],
    method: str,
    K_range: list[int],
    cfg: ClusterConfig | None = None,
    exclude: set[str] | None = None,
    vectors: np.ndarray | None = None,
    thresholds: tuple[float, ...] = (0.9, 0.95, 0.99),
) -> PurityCurve:
    """Purity at each K, the area under the curve divided by N, and the
    cluster-count reduction achieving each purity threshold.

    Agglomerative methods build one dendrogram and cut it at every K.
    """
    if not K_range:
        raise DataError("empty K_range")
    K_range = list(K_range)
    if sorted(set(K_range)) != K_range:
        raise DataError("K_range must be strictly ascending")
    n = D.n
    if K_range[0] < 1 or K_range[-1] > n:
        raise DataError(f"K_range must lie within [1, {n}]")
    exclude = exclude or set()
    keep = [i for i, t in enumerate(truth) if t is not None and t not in exclude]
    if not keep:
        raise DataError("no bags left to evaluate after exclusion")
    kept_truth = [truth[i] for i in keep]
    cfg = cfg or ClusterConfig()

    if method in LINKAGES:
        merges = linkage_merges(D.values, method)
        label_sets = [cut_merges(n, merges, K) for K in K_range]
    else:
        label_sets = [
            cluster_distance_matrix(D, method, K, cfg, vectors=vectors).labels for K in K_range
        ]
    points = []
    for K, labels in zip(K_range, label_sets):
        points.append((K, purity(kept_truth, labels[keep])))

    # Left-rectangle area over [K_i, K_{i+1}), last rectangle width reaches N+1.
    widths = [K_range[i + 1] - K_range[i] for i in range(len(K_range) - 1)]
    widths.append(n - K_range[-1] + 1)
    area = sum(p * w for (_, p), w in zip(points, widths))
    mauc = area / n

    r_at_p = {}
    for thr in thresholds:
        reached = [k for k, p in points if p >= thr]
        r_at_p[thr] = 1.0 - reached[0] / n if reached else 0.0
    return PurityCurve(points=tuple(points), mauc=mauc, r_at_p=r_at_p)


# ---------------------------------------------------------------------------
# Localization AUC

def upsample_bilinear(grid_values: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with half-pixel-aligned sample centers."""
    src = np.asarray(grid_values, dtype=np.float64)
    rows, cols = src.shape
    out_h, out_w = out_shape

    def coords(n_out, n_src):
        c = (np.arange(n_out) + 0.5) * n_src / n_out - 0.5
        return np.clip(c, 0.0, n_src - 1.0)

    ys = coords(out_h, rows)
    xs = coords(out_w, cols)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (
        (1 - fy) * (1 - fx) * src[np.ix_(y0, x0)]
        + (1 - fy) * fx * src[np.ix_(y0, x1)]
        + fy * (1 - fx) * src[np.ix_(y1, x0)]
        + fy * fx * src[np.ix_(y1, x1)]
    )


def roc_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-statistic ROC-AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives).ravel().astype(bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC-AUC needs both positive and negative pixels")
    ranks = rankdata(scores, method="average")
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def localization_auc(
    weights: list[WeightVector], masks: MaskSet, per_image: bool = False
):
    """Pooled pixel-level AUC of upsampled weight maps against binary masks."""
    all_scores = []
    all_truth = []
    per_image_auc = {}
    for w in weights:
        if w.grid is None:
            raise DataError(f"weight vector {w.bag_id!r} has no grid")
        if w.bag_id not in masks:
            raise DataError(f"no mask for bag {w.bag_id!r}")
        mask = masks[w.bag_id]
        heat = upsample_bilinear(w.values.reshape(w.grid), mask.shape)
        all_scores.append(heat.ravel())
        all_truth.append(mask.ravel().astype(bool))
        if per_image:
            pos = mask.ravel().astype(bool)
            if pos.any() and not pos.all():
                per_image_auc[w.bag_id] = roc_auc(heat.ravel(), pos)
    if not all_scores:
        raise DataError("no weight/mask pairs to evaluate")
    overall = roc_auc(np.concatenate(all_scores), np.concatenate(all_truth))
    if per_image:
        return overall, per_image_auc
    return overall
