import itertools

import numpy as np
import pytest

from mibag.bagstore import DataError
from mibag.clusterers import (
    ClusterAssignment,
    ClusterConfig,
    _gmm_fit,
    _kmeanspp_init,
    _lloyd,
    _pam_build,
    _pam_cost,
    _pam_run,
    agglomerative,
    assignment_from_csv,
    assignment_to_csv,
    cut_merges,
    gmm_full,
    kmeans,
    kmeans_fit,
    kmedoids,
    linkage_merges,
    spectral,
)
from mibag.distances import DistanceMatrix


def dmat(points_or_matrix):
    arr = np.asarray(points_or_matrix, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != arr.shape[1] or not np.allclose(arr, arr.T):
        vals = np.linalg.norm(arr[:, None] - arr[None, :], axis=-1)
    else:
        vals = arr
    return DistanceMatrix(
        values=vals, measure="test", ids=tuple(f"p{i}" for i in range(vals.shape[0]))
    )


def random_distance_matrix(rng, n, euclidean=True):
    if euclidean:
        pts = rng.normal(size=(n, 3))
        vals = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    else:
        m = rng.uniform(0.1, 2.0, size=(n, n))
        vals = 0.5 * (m + m.T)
        np.fill_diagonal(vals, 0.0)
    return vals


def two_blobs(rng, per=5, sep=8.0, dim=2):
    a = rng.normal(0.0, 0.1, (per, dim))
    b = rng.normal(0.0, 0.1, (per, dim)) + sep
    return np.vstack([a, b]), np.array([0] * per + [1] * per)


def same_partition(a, b):
    mapping = {}
    for x, y in zip(a, b):
        if x in mapping and mapping[x] != y:
            return False
        mapping[x] = y
    return len(set(mapping.values())) == len(mapping)


# --- independent reference: recompute linkage from scratch every merge ------

def reference_merges(dist, linkage):
    n = dist.shape[0]
    sq = dist.astype(np.float64) ** 2
    clusters = {i: list(range(i, i + 1)) for i in range(n)}

    def link(A, B):
        if linkage == "single":
            return dist[np.ix_(A, B)].min()
        if linkage == "complete":
            return dist[np.ix_(A, B)].max()
        if linkage == "average":
            return dist[np.ix_(A, B)].mean()
        # ward: squared-distance centroid algebra evaluated from scratch
        e_ab = sq[np.ix_(A, B)].mean()
        e_aa = sq[np.ix_(A, A)].mean()
        e_bb = sq[np.ix_(B, B)].mean()
        na, nb = len(A), len(B)
        return (2.0 * na * nb / (na + nb)) * (e_ab - e_aa / 2.0 - e_bb / 2.0)

    merges = []
    for _ in range(n - 1):
        ids = sorted(clusters)
        best = None
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                d = link(clusters[ids[x]], clusters[ids[y]])
                if best is None or d < best[0]:
                    best = (d, ids[x], ids[y])
        _, i, j = best
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]
        merges.append((i, j))
    return merges


class TestAgglomerative:
    def test_no_merge_when_k_equals_n(self):
        assert agglomerative(dmat([0.0, 1.0]), "ward", 2).labels.tolist() == [0, 1]

    @pytest.mark.parametrize("linkage", ["ward", "single", "complete", "average"])
    def test_three_points(self, linkage):
        labels = agglomerative(dmat([0.0, 1.0, 10.0]), linkage, 2).labels
        assert same_partition(labels, [0, 0, 1])

    def test_k1_single_label(self, rng):
        D = dmat(rng.normal(size=5))
        assert set(agglomerative(D, "average", 1).labels.tolist()) == {0}

    def test_k_exceeds_n(self):
        with pytest.raises(DataError):
            agglomerative(dmat([0.0, 1.0]), "ward", 3)

    @pytest.mark.parametrize("linkage", ["ward", "single", "complete", "average"])
    @pytest.mark.parametrize("euclidean", [True, False])
    def test_merge_sequence_matches_reference(self, rng, linkage, euclidean):
        for _ in range(25):
            n = int(rng.integers(3, 11))
            vals = random_distance_matrix(rng, n, euclidean)
            assert linkage_merges(vals, linkage) == reference_merges(vals, linkage)

    def test_labels_ordered_by_first_element(self):
        # {1, 3} merge first; cluster containing index 0 still gets label 0.
        pts = [5.0, 0.0, 5.1, 0.05]
        labels = agglomerative(dmat(pts), "single", 2).labels
        assert labels.tolist() == [0, 1, 0, 1]

    def test_cut_consistency_across_k(self, rng):
        vals = random_distance_matrix(rng, 8)
        merges = linkage_merges(vals, "ward")
        for K in range(1, 9):
            labels = cut_merges(8, merges, K)
            assert len(set(labels.tolist())) == K


class TestKmeans:
    def test_two_clusters_1d(self):
        X = np.array([[0.0], [1.0], [10.0], [11.0]])
        labels = kmeans(X, 2, ClusterConfig(seed=0)).labels
        assert same_partition(labels, [0, 0, 1, 1])

    def test_k_equals_n_zero_inertia(self, rng):
        X = rng.normal(size=(5, 2))
        _, inertia, _ = kmeans_fit(X, 5, ClusterConfig(seed=1))
        assert inertia == pytest.approx(0.0, abs=1e-12)

    def test_duplicates_share_label(self):
        X = np.array([[1.0, 1.0]] * 4 + [[5.0, 5.0]] * 2)
        labels = kmeans(X, 2, ClusterConfig(seed=0)).labels
        assert len(set(labels[:4].tolist())) == 1
        assert len(set(labels[4:].tolist())) == 1

    def test_k_exceeds_n(self):
        with pytest.raises(DataError):
            kmeans(np.zeros((2, 2)), 3, ClusterConfig())

    def test_deterministic(self, rng):
        X = rng.normal(size=(20, 3))
        cfg = ClusterConfig(seed=7)
        a = kmeans(X, 3, cfg).labels
        b = kmeans(X, 3, cfg).labels
        assert np.array_equal(a, b)

    def test_best_restart_never_worse_than_candidates(self, rng):
        X = rng.normal(size=(12, 2))
        cfg = ClusterConfig(seed=5, restarts=8)
        _, best_inertia, _ = kmeans_fit(X, 3, cfg)
        for r in range(cfg.restarts):
            centers = _kmeanspp_init(X, 3, np.random.default_rng([cfg.seed, r]))
            _, inertia, _ = _lloyd(X, centers, cfg.max_iter, cfg.tol)
            assert best_inertia <= inertia + 1e-12

    def test_matches_exhaustive_partition_optimum(self, rng):
        # Lloyd is a local search: enough k-means++ restarts are needed to
        # reach the global optimum on unstructured instances.
        def exhaustive_best_inertia(X, K):
            n = X.shape[0]
            best = np.inf
            for assign in itertools.product(range(K), repeat=n):
                inertia = 0.0
                for k in range(K):
                    members = X[[i for i in range(n) if assign[i] == k]]
                    if len(members):
                        inertia += ((members - members.mean(axis=0)) ** 2).sum()
                best = min(best, inertia)
            return best

        for trial in range(8):
            n = int(rng.integers(4, 9))
            K = int(rng.integers(2, 4))
            X = rng.normal(size=(n, 2))
            _, inertia, _ = kmeans_fit(X, K, ClusterConfig(seed=trial, restarts=30))
            assert inertia == pytest.approx(exhaustive_best_inertia(X, K), abs=1e-9)


class TestSpectral:
    def test_blob_recovery(self, rng):
        X, truth = two_blobs(rng)
        labels = spectral(dmat(X), 2, ClusterConfig(seed=0)).labels
        assert same_partition(labels, truth)

    def test_k1(self, rng):
        X, _ = two_blobs(rng)
        assert set(spectral(dmat(X), 1, ClusterConfig(seed=0)).labels.tolist()) == {0}

    def test_n2_k2_forced_split(self):
        assert sorted(spectral(dmat([0.0, 1.0]), 2, ClusterConfig(seed=0)).labels.tolist()) == [0, 1]

    def test_degenerate_all_zero_warns(self):
        D = DistanceMatrix(values=np.zeros((3, 3)), measure="t", ids=("a", "b", "c"))
        with pytest.warns(UserWarning, match="single cluster"):
            out = spectral(D, 2, ClusterConfig(seed=0))
        assert set(out.labels.tolist()) == {0}
        assert out.empty_clusters == (1,)

    def test_fixed_sigma(self, rng):
        X, truth = two_blobs(rng)
        cfg = ClusterConfig(seed=0, spectral_sigma=1.0)
        assert same_partition(spectral(dmat(X), 2, cfg).labels, truth)


class TestGmm:
    def test_blob_recovery(self, rng):
        X, truth = two_blobs(rng, per=8)
        labels = gmm_full(X, 2, ClusterConfig(seed=0)).labels
        assert same_partition(labels, truth)

    def test_k1_mean_is_data_mean(self, rng):
        X = rng.normal(size=(12, 3))
        _, means, _ = _gmm_fit(X, 1, ClusterConfig(seed=0), reg=1e-6)
        assert np.abs(means[0] - X.mean(axis=0)).max() < 1e-9

    def test_translation_invariance(self, rng):
        X, _ = two_blobs(rng, per=6)
        cfg = ClusterConfig(seed=3)
        a = gmm_full(X, 2, cfg).labels
        b = gmm_full(X + 100.0, 2, cfg).labels
        assert np.array_equal(a, b)

    def test_loglik_monotone(self, rng):
        for trial in range(5):
            X = rng.normal(size=(15, 2)) + rng.integers(0, 4, size=(15, 1))
            _, _, history = _gmm_fit(X, 3, ClusterConfig(seed=trial), reg=1e-6)
            diffs = np.diff(history)
            assert (diffs >= -1e-8).all()

    def test_reg_escalation_on_degenerate_data(self):
        # Rank-deficient data (duplicate points) needs escalated regularization.
        X = np.array([[0.0, 0.0]] * 3 + [[1.0, 1.0]] * 3)
        out = gmm_full(X, 2, ClusterConfig(seed=0, gmm_reg=1e-6))
        assert set(out.labels.tolist()) <= {0, 1}


class TestKmedoids:
    def test_three_points(self):
        D = dmat([0.0, 1.0, 10.0])
        out = kmedoids(D, 2, ClusterConfig())
        assert same_partition(out.labels, [0, 0, 1])
        cost = _pam_cost(D.values, _pam_build(D.values, 2))
        assert cost == pytest.approx(1.0)

    def test_k_equals_n_zero_cost(self, rng):
        vals = random_distance_matrix(rng, 5)
        D = dmat(vals)
        labels = kmedoids(D, 5, ClusterConfig()).labels
        assert sorted(labels.tolist()) == [0, 1, 2, 3, 4]

    def test_duplicates_share_cluster(self):
        vals = dmat([0.0, 0.0, 9.0])
        labels = kmedoids(vals, 2, ClusterConfig()).labels
        assert labels[0] == labels[1]

    def test_swap_local_optimality_contract(self, rng):
        # PAM's guarantee: final cost <= BUILD cost and no single swap improves.
        for trial in range(30):
            n = int(rng.integers(4, 10))
            K = int(rng.integers(1, 4))
            vals = random_distance_matrix(rng, n, euclidean=(trial % 2 == 0))
            build_cost = _pam_cost(vals, _pam_build(vals, K))
            medoids, cost = _pam_run(vals, K)
            assert cost <= build_cost + 1e-12
            for m in medoids:
                for h in set(range(n)) - set(medoids):
                    swapped = sorted(set(medoids) - {m} | {h})
                    assert _pam_cost(vals, swapped) >= cost - 1e-12

    def test_matches_exhaustive_on_separated_clusters(self, rng):
        for trial in range(10):
            K = int(rng.integers(1, 4))
            sizes = rng.integers(1, 4, size=K)
            pts = np.concatenate(
                [rng.normal(10.0 * k, 0.2, size=(sizes[k], 2)) for k in range(K)]
            )
            vals = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            best = min(
                _pam_cost(vals, list(combo))
                for combo in itertools.combinations(range(len(pts)), K)
            )
            _, cost = _pam_run(vals, K)
            assert cost == pytest.approx(best, abs=1e-9)

    def test_matches_exhaustive_medoid_optimum_pinned(self):
        # PAM is a local search; on this pinned random Euclidean sample the
        # swap descent reaches the exhaustive optimum on every instance.
        r = np.random.default_rng(0)
        for _ in range(15):
            n = int(r.integers(4, 9))
            K = int(r.integers(1, 4))
            pts = r.normal(size=(n, 3))
            vals = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            best = min(
                _pam_cost(vals, list(combo)) for combo in itertools.combinations(range(n), K)
            )
            _, cost = _pam_run(vals, K)
            assert cost == pytest.approx(best, abs=1e-9)


class TestAssignmentExport:
    def test_csv_round_trip(self, tmp_path):
        asg = ClusterAssignment(labels=np.array([0, 1, 1]), K=2)
        assignment_to_csv(["a", "b", "c"], asg, tmp_path / "a.csv")
        assert assignment_from_csv(tmp_path / "a.csv") == {"a": 0, "b": 1, "c": 1}

    def test_labels_range_checked(self):
        with pytest.raises(DataError):
            ClusterAssignment(labels=np.array([0, 2]), K=2)

    def test_empty_cluster_flagged(self):
        asg = ClusterAssignment(labels=np.array([0, 0, 2]), K=3)
        assert asg.empty_clusters == (1,)
