"""Similarity-based clustering backends.

Agglomerative clustering (four linkages via Lance-Williams updates),
spectral clustering on a Gaussian affinity, k-means with k-means++
seeding, full-covariance Gaussian mixtures, and PAM k-medoids. Everything
is deterministic for a fixed seed; ties always resolve to the lowest
index.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .bagstore import DataError
from .distances import DistanceMatrix

LINKAGES = ("ward", "single", "complete", "average")
METHODS = ("ward", "single", "complete", "average", "spectral", "kmeans", "gmm", "kmedoids")


@dataclass(frozen=True)
class ClusterAssignment:
    """Labels in [0, K) for each bag; empty clusters are flagged, not hidden."""

    labels: np.ndarray
    K: int
    empty_clusters: tuple[int, ...] = ()

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise DataError("labels must be a vector")
        if self.K < 1:
            raise DataError(f"K must be >= 1, got {self.K}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise DataError(f"labels outside [0, {self.K})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        present = set(np.unique(labels).tolist())
        object.__setattr__(
            self, "empty_clusters", tuple(k for k in range(self.K) if k not in present)
        )


@dataclass(frozen=True)
class ClusterConfig:
    method: str = "ward"
    K: int = 1
    seed: int = 0
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    gmm_reg: float = 1e-6
    spectral_sigma: float | str = "median"

    def __post_init__(self):
        if self.K < 1:
            raise DataError(f"K must be >= 1, got {self.K}")
        if self.restarts < 1:
            raise DataError(f"restarts must be >= 1, got {self.restarts}")
        if self.method not in METHODS:
            raise DataError(f"unknown method {self.method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# Agglomerative clustering

def linkage_merges(dist: np.ndarray, linkage: str) -> list[tuple[int, int]]:
    """Full bottom-up merge sequence from N singletons.

    Clusters are identified by their smallest original member; each merge
    (i, j) with i < j folds cluster j into cluster i. Ward maintains
    squared distances under the Lance-Williams recursion; ties pick the
    lexicographically smallest (i, j).
    """
    if linkage not in LINKAGES:
        raise DataError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    work = dist ** 2 if linkage == "ward" else dist.copy()
    np.fill_diagonal(work, np.inf)
    sizes = np.ones(n, dtype=np.int64)
    active = list(range(n))
    merges: list[tuple[int, int]] = []

    for _ in range(n - 1):
        act = np.array(active)
        sub = work[np.ix_(act, act)]
        iu = np.triu_indices(len(act), k=1)
        flat = sub[iu]
        # argmin returns the first minimum: row-major upper triangle over an
        # ascending id list is exactly lexicographic (i, j) order.
        best = int(np.argmin(flat))
        i = int(act[iu[0][best]])
        j = int(act[iu[1][best]])

        ni, nj = sizes[i], sizes[j]
        others = [k for k in active if k != i and k != j]
        if others:
            ks = np.array(others)
            nk = sizes[ks].astype(np.float64)
            dik = work[i, ks]
            djk = work[j, ks]
            if linkage == "single":
                new = np.minimum(dik, djk)
            elif linkage == "complete":
                new = np.maximum(dik, djk)
            elif linkage == "average":
                new = (ni * dik + nj * djk) / (ni + nj)
            else:  # ward, on squared distances
                denom = ni + nj + nk
                new = ((ni + nk) * dik + (nj + nk) * djk - nk * work[i, j]) / denom
            work[i, ks] = new
            work[ks, i] = new
        work[j, :] = np.inf
        work[:, j] = np.inf
        sizes[i] += sizes[j]
        active.remove(j)
        merges.append((i, j))
    return merges


def cut_merges(n: int, merges: list[tuple[int, int]], K: int) -> np.ndarray:
    """Labels after replaying the first n-K merges; label order follows each
    cluster's first original element."""
    if not 1 <= K <= n:
        raise DataError(f"K={K} out of range for N={n}")
    parent = np.arange(n)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in merges[: n - K]:
        parent[find(j)] = find(i)
    roots = np.array([find(x) for x in range(n)])
    order = {r: rank for rank, r in enumerate(sorted(set(roots.tolist())))}
    return np.array([order[r] for r in roots], dtype=np.int64)


def agglomerative(D: DistanceMatrix, linkage: str, K: int) -> ClusterAssignment:
    if K > D.n:
        raise DataError(f"K={K} exceeds N={D.n}")
    merges = linkage_merges(D.values, linkage)
    return ClusterAssignment(labels=cut_merges(D.n, merges, K), K=K)


# ---------------------------------------------------------------------------
# k-means

def _sq_dists_to(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return np.einsum("ij,ij->i", diff, diff)


def _kmeanspp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists_to(X, X[chosen[0]])
    while len(chosen) < K:
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # All remaining mass is zero (duplicates): lowest unchosen index.
            idx = int(next(i for i in range(n) if i not in chosen))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists_to(X, X[idx]))
    return X[chosen].astype(np.float64, copy=True)


def _assign(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = np.stack([_sq_dists_to(X, c) for c in centers], axis=1)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    K = centers.shape[0]
    for _ in range(max_iter):
        labels, own_d2 = _assign(X, centers)
        # Empty-cluster repair: re-seed at the point farthest from its centroid.
        for k in range(K):
            if not np.any(labels == k):
                far = int(np.argmax(own_d2))
                centers[k] = X[far]
                labels[far] = k
                own_d2[far] = 0.0
        new_centers = centers.copy()
        for k in range(K):
            members = labels == k
            if np.any(members):
                new_centers[k] = X[members].mean(axis=0)
        shift = np.sqrt(np.max(np.einsum("ij,ij->i", new_centers - centers, new_centers - centers)))
        centers = new_centers
        if shift <= tol:
            break
    labels, own_d2 = _assign(X, centers)
    return labels, float(own_d2.sum()), centers


def kmeans_fit(vectors: np.ndarray, K: int, cfg: ClusterConfig):
    """Winner over cfg.restarts by (inertia, restart index); returns
    (labels, inertia, centers)."""
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if K > n:
        raise DataError(f"K={K} exceeds N={n}")
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        centers = _kmeanspp_init(X, K, rng)
        labels, inertia, fitted = _lloyd(X, centers, cfg.max_iter, cfg.tol)
        key = (inertia, r)
        if best is None or key < best[0]:
            best = (key, labels, inertia, fitted)
    return best[1], best[2], best[3]


def kmeans(vectors: np.ndarray, K: int, cfg: ClusterConfig) -> ClusterAssignment:
    """k-means++ seeding + Lloyd iterations, best inertia over cfg.restarts."""
    labels, _, _ = kmeans_fit(vectors, K, cfg)
    return ClusterAssignment(labels=labels, K=K)


# ---------------------------------------------------------------------------
# Spectral clustering

def spectral(D: DistanceMatrix, K: int, cfg: ClusterConfig) -> ClusterAssignment:
    """Gaussian affinity, symmetric normalized Laplacian, k-means on the
    row-normalized bottom-K eigenvector embedding."""
    n = D.n
    if n < 2:
        raise DataError("spectral clustering needs N >= 2")
    if K > n:
        raise DataError(f"K={K} exceeds N={n}")
    vals = D.values
    off = vals[np.triu_indices(n, k=1)]
    if np.all(off == 0):
        if K > 1:
            warnings.warn("all pairwise distances are zero; returning a single cluster")
        return ClusterAssignment(labels=np.zeros(n, dtype=np.int64), K=K)
    if cfg.spectral_sigma == "median":
        sigma = float(np.median(off))
        if sigma == 0.0:
            sigma = float(off[off > 0].min())
    else:
        sigma = float(cfg.spectral_sigma)
        if sigma <= 0:
            raise DataError(f"spectral sigma must be positive, got {sigma}")
    affinity = np.exp(-(vals ** 2) / (2.0 * sigma ** 2))
    np.fill_diagonal(affinity, 1.0)
    dinv = 1.0 / np.sqrt(affinity.sum(axis=1))
    lap = np.eye(n) - dinv[:, None] * affinity * dinv[None, :]
    lap = 0.5 * (lap + lap.T)
    _, vecs = np.linalg.eigh(lap)
    emb = vecs[:, :K].copy()
    norms = np.linalg.norm(emb, axis=1)
    nz = norms > 0
    emb[nz] /= norms[nz, None]
    labels, _, _ = kmeans_fit(emb, K, cfg)
    return ClusterAssignment(labels=labels, K=K)


# ---------------------------------------------------------------------------
# Gaussian mixture, full covariance

class _SingularCovariance(Exception):
    def __init__(self, component: int):
        self.component = component


def _gmm_log_prob(X: np.ndarray, means, covs, log_weights) -> np.ndarray:
    n, d = X.shape
    K = means.shape[0]
    log_prob = np.empty((n, K))
    for k in range(K):
        try:
            chol = np.linalg.cholesky(covs[k])
        except np.linalg.LinAlgError:
            raise _SingularCovariance(k) from None
        diff = (X - means[k]).T
        y = solve_triangular(chol, diff, lower=True)
        maha = np.einsum("ij,ij->j", y, y)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        log_prob[:, k] = -0.5 * (d * np.log(2.0 * np.pi) + log_det + maha) + log_weights[k]
    return log_prob


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - amax).sum(axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def _gmm_m_step(X: np.ndarray, resp: np.ndarray, reg: float):
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
    weights = nk / n
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for k in range(resp.shape[1]):
        diff = X - means[k]
        covs[k] = (resp[:, k][:, None] * diff).T @ diff / nk[k]
        covs[k].flat[:: d + 1] += reg
    return weights, means, covs


def _gmm_fit(X: np.ndarray, K: int, cfg: ClusterConfig, reg: float):
    labels, _, _ = kmeans_fit(X, K, cfg)
    resp = np.zeros((X.shape[0], K))
    resp[np.arange(X.shape[0]), labels] = 1.0
    weights, means, covs = _gmm_m_step(X, resp, reg)
    history: list[float] = []
    for _ in range(cfg.max_iter):
        log_prob = _gmm_log_prob(X, means, covs, np.log(weights))
        log_norm = _logsumexp(log_prob, axis=1)
        ll = float(log_norm.mean())
        if history and ll < history[-1] - 1e-8:
            raise RuntimeError(f"EM log-likelihood decreased: {history[-1]} -> {ll}")
        converged = bool(history) and abs(ll - history[-1]) < cfg.tol
        history.append(ll)
        resp = np.exp(log_prob - log_norm[:, None])
        weights, means, covs = _gmm_m_step(X, resp, reg)
        if converged:
            break
    log_prob = _gmm_log_prob(X, means, covs, np.log(weights))
    return np.argmax(log_prob, axis=1), means, history


def gmm_full(vectors: np.ndarray, K: int, cfg: ClusterConfig) -> ClusterAssignment:
    """EM for a full-covariance mixture, initialized from k-means; covariance
    regularization escalates x10 (up to 1e-2) if a component goes singular."""
    X = np.asarray(vectors, dtype=np.float64)
    if K > X.shape[0]:
        raise DataError(f"K={K} exceeds N={X.shape[0]}")
    reg = cfg.gmm_reg
    last: _SingularCovariance | None = None
    while reg <= 1e-2:
        try:
            labels, _, _ = _gmm_fit(X, K, cfg, reg)
            return ClusterAssignment(labels=labels, K=K)
        except _SingularCovariance as exc:
            last = exc
            reg *= 10
    raise DataError(
        f"singular covariance for component {last.component} despite regularization up to 1e-2"
    )


# ---------------------------------------------------------------------------
# PAM k-medoids

def _pam_cost(vals: np.ndarray, medoids: list[int]) -> float:
    return float(vals[:, medoids].min(axis=1).sum())


def _pam_build(vals: np.ndarray, K: int) -> list[int]:
    n = vals.shape[0]
    medoids = [int(np.argmin(vals.sum(axis=1)))]
    nearest = vals[:, medoids[0]].copy()
    while len(medoids) < K:
        reduction = np.maximum(nearest[None, :] - vals.T, 0.0).sum(axis=1)
        reduction[medoids] = -np.inf
        cand = int(np.argmax(reduction))
        medoids.append(cand)
        nearest = np.minimum(nearest, vals[:, cand])
    return sorted(medoids)


def _pam_run(vals: np.ndarray, K: int) -> tuple[list[int], float]:
    """BUILD then best-improvement SWAP; returns the final medoid set and cost."""
    n = vals.shape[0]
    medoids = _pam_build(vals, K)
    cost = _pam_cost(vals, medoids)
    while True:
        med_d = vals[:, medoids]  # (n, K)
        order = np.argsort(med_d, axis=1, kind="stable")
        d1 = med_d[np.arange(n), order[:, 0]]
        nearest_pos = order[:, 0]
        d2 = med_d[np.arange(n), order[:, 1]] if K > 1 else np.full(n, np.inf)
        best_delta = 0.0
        best_swap = None
        in_medoids = np.zeros(n, dtype=bool)
        in_medoids[medoids] = True
        for pos, m in enumerate(medoids):
            owned = nearest_pos == pos
            for h in range(n):
                if in_medoids[h]:
                    continue
                dh = vals[:, h]
                delta = float(
                    np.where(owned, np.minimum(d2, dh) - d1, np.minimum(dh - d1, 0.0)).sum()
                )
                # Strict < keeps the first (lowest-index) swap among ties.
                if delta < best_delta:
                    best_delta = delta
                    best_swap = (m, h)
        if best_swap is None:
            break
        m, h = best_swap
        medoids = sorted(set(medoids) - {m} | {h})
        new_cost = _pam_cost(vals, medoids)
        if new_cost >= cost:  # numerical guard; SWAP must strictly improve
            medoids = sorted(set(medoids) - {h} | {m})
            break
        cost = new_cost
    return medoids, cost


def kmedoids(D: DistanceMatrix, K: int, cfg: ClusterConfig) -> ClusterAssignment:
    """PAM: greedy BUILD then best-improvement SWAP until no swap lowers cost."""
    if K > D.n:
        raise DataError(f"K={K} exceeds N={D.n}")
    medoids, _ = _pam_run(D.values, K)
    labels = np.argmin(D.values[:, medoids], axis=1)
    return ClusterAssignment(labels=np.asarray(labels, dtype=np.int64), K=K)


# ---------------------------------------------------------------------------
# Dispatch + export

def cluster_distance_matrix(
    D: DistanceMatrix, method: str, K: int, cfg: ClusterConfig, vectors: np.ndarray | None = None
) -> ClusterAssignment:
    """Route to the right backend; kmeans/gmm need aggregated vectors."""
    if method in LINKAGES:
        return agglomerative(D, method, K)
    if method == "spectral":
        return spectral(D, K, cfg)
    if method == "kmedoids":
        return kmedoids(D, K, cfg)
    if method in ("kmeans", "gmm"):
        if vectors is None:
            raise DataError(f"method {method!r} requires aggregated vectors")
        return kmeans(vectors, K, cfg) if method == "kmeans" else gmm_full(vectors, K, cfg)
    raise DataError(f"unknown method {method!r}; expected one of {METHODS}")


def assignment_to_csv(ids, assignment: ClusterAssignment, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "label"])
        for bag_id, label in zip(ids, assignment.labels):
            writer.writerow([bag_id, int(label)])


def assignment_from_csv(path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["bag_id", "label"]:
            raise DataError(f"{path}: unexpected assignment header {header}")
        return {row[0]: int(row[1]) for row in reader}


def assignment_to_json(ids, assignment: ClusterAssignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({bag_id: int(label) for bag_id, label in zip(ids, assignment.labels)}, fh)
        fh.write("\n")
