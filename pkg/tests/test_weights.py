import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mibag.bagstore import Bag, DataError, Dataset
from mibag.distances import directed_hausdorff, wa_distance
from mibag.weights import (
    WeightConfig,
    WeightVector,
    combined_topk_soft_weights,
    hard_topk_weights,
    mask_weights,
    maxh_onehot_weights,
    min_distance_profile,
    semi_soft_weights,
    softmax,
    uniform_weights,
    unsup_scores,
    unsup_soft_weights,
    weights_from_json,
    weights_to_json,
)

from conftest import make_bag, make_dataset

TWO_POINT_SOFTMAX = (1.0 / (1.0 + math.e), math.e / (1.0 + math.e))  # scores (0, tau)


def bag1d(values, bag_id="b"):
    return Bag(id=bag_id, embeddings=np.array(values, dtype=np.float32).reshape(-1, 1))


class TestWeightVector:
    def test_simplex_violations(self):
        with pytest.raises(DataError):
            WeightVector(np.array([0.5, 0.6]))
        with pytest.raises(DataError):
            WeightVector(np.array([1.5, -0.5]))
        with pytest.raises(DataError):
            WeightVector(np.array([np.nan, 1.0]))

    def test_grid_length_mismatch(self):
        with pytest.raises(DataError):
            WeightVector(np.array([0.5, 0.5]), grid=(2, 2))


class TestWeightConfig:
    def test_tau_positive(self):
        with pytest.raises(DataError):
            WeightConfig(tau=0.0)

    def test_k_positive(self):
        with pytest.raises(DataError):
            WeightConfig(k=0)


class TestUniform:
    def test_m4(self, rng):
        w = uniform_weights(make_bag(rng, 4, 2))
        assert np.allclose(w.values, 0.25)

    def test_m1(self, rng):
        assert uniform_weights(make_bag(rng, 1, 2)).values.tolist() == [1.0]

    @pytest.mark.parametrize("m", [2, 7, 33])
    def test_sums_to_one(self, rng, m):
        assert uniform_weights(make_bag(rng, m, 3)).values.sum() == pytest.approx(1.0)


class TestMinDistanceProfile:
    def test_enumerated(self):
        assert min_distance_profile(bag1d([0, 1]), bag1d([0, 3])).tolist() == [0.0, 1.0]

    def test_self(self, rng):
        bag = make_bag(rng, 5, 3)
        assert np.allclose(min_distance_profile(bag, bag), 0.0)

    def test_single_pair(self):
        assert min_distance_profile(bag1d([5]), bag1d([2])).tolist() == [3.0]

    def test_dim_mismatch(self, rng):
        with pytest.raises(DataError):
            min_distance_profile(make_bag(rng, 2, 2), make_bag(rng, 2, 3))


class TestSoftmax:
    def test_shift_invariance(self, rng):
        s = rng.normal(size=20)
        for shift in (1.0, -17.5, 1e3):
            assert np.abs(softmax(s, 0.3) - softmax(s + shift, 0.3)).max() < 1e-9

    def test_monotone_in_tau(self, rng):
        # Decreasing tau strictly increases the top weight for non-constant scores.
        s = rng.normal(size=12)
        taus = [10.0, 1.0, 0.5, 0.1, 0.01]
        tops = [softmax(s, t).max() for t in taus]
        assert all(b > a for a, b in zip(tops, tops[1:]))

    def test_tiny_tau_one_hot(self):
        s = np.array([0.1, 0.9, 0.5])
        w = softmax(s, 1e-6)
        assert np.abs(w - [0, 1, 0]).max() < 1e-6


class TestUnsupSoftWeights:
    def test_huge_tau_uniform(self, rng):
        ds = make_dataset(rng, 5, 6, 3)
        for w in unsup_soft_weights(ds, WeightConfig(tau=1e6)):
            assert np.abs(w.values - 1.0 / 6).max() < 1e-6

    def test_two_instance_closed_form(self):
        # Mean-min scores are exactly (0, tau) for this pair, tau = 0.5.
        ds = Dataset(bags=(bag1d([0, 1], "i"), bag1d([0, 0.5], "j")))
        w = unsup_soft_weights(ds, WeightConfig(tau=0.5))[0]
        assert np.allclose(w.values, TWO_POINT_SOFTMAX, atol=1e-12)

    def test_min_aggregator_duplicate_uniform(self, rng):
        base = make_bag(rng, 6, 3, "orig")
        dup = Bag(id="dup", embeddings=base.embeddings.copy())
        other = make_bag(rng, 6, 3, "other")
        ds = Dataset(bags=(base, dup, other))
        w = unsup_soft_weights(ds, WeightConfig(tau=0.1), aggregator="min")[0]
        assert np.abs(w.values - 1.0 / 6).max() < 1e-9

    def test_subsample_full_size_bitwise(self, rng):
        ds = make_dataset(rng, 7, 5, 3)
        full = unsup_soft_weights(ds, WeightConfig(tau=0.2, seed=9))
        sub = unsup_soft_weights(ds, WeightConfig(tau=0.2, seed=9, subsample_size=6))
        for a, b in zip(full, sub):
            assert a.values.tobytes() == b.values.tobytes()

    def test_subsample_deterministic(self, rng):
        ds = make_dataset(rng, 8, 4, 2)
        cfg = WeightConfig(tau=0.2, seed=3, subsample_size=3)
        a = unsup_soft_weights(ds, cfg)
        b = unsup_soft_weights(ds, cfg)
        for x, y in zip(a, b):
            assert x.values.tobytes() == y.values.tobytes()

    def test_subsample_too_large(self, rng):
        ds = make_dataset(rng, 4, 3, 2)
        with pytest.raises(DataError):
            unsup_scores(ds, WeightConfig(subsample_size=4))

    def test_needs_two_bags(self, rng):
        ds = make_dataset(rng, 1, 3, 2)
        with pytest.raises(DataError):
            unsup_soft_weights(ds, WeightConfig())

    @pytest.mark.parametrize("aggregator", ["mean", "max", "min"])
    def test_simplex_all_aggregators(self, rng, aggregator):
        ds = make_dataset(rng, 5, 4, 3)
        for w in unsup_soft_weights(ds, WeightConfig(tau=0.05), aggregator=aggregator):
            assert w.values.sum() == pytest.approx(1.0, abs=1e-9)
            assert w.values.min() >= 0


class TestSemiSoftWeights:
    def test_reference_identical_uniform(self, rng):
        bag = make_bag(rng, 5, 3, "a")
        ref = Bag(id="ref", embeddings=bag.embeddings.copy())
        ds = Dataset(bags=(bag,), reference_bags=(ref,))
        w = semi_soft_weights(ds, WeightConfig(tau=0.1))[0]
        assert np.allclose(w.values, 0.2, atol=1e-12)

    def test_two_instance_closed_form(self):
        ds = Dataset(bags=(bag1d([0, 1], "i"),), reference_bags=(bag1d([0, 0.5], "ref"),))
        w = semi_soft_weights(ds, WeightConfig(tau=0.5))[0]
        assert np.allclose(w.values, TWO_POINT_SOFTMAX, atol=1e-12)

    def test_huge_tau_uniform(self, rng):
        ds = make_dataset(rng, 3, 4, 2, n_reference=2)
        for w in semi_soft_weights(ds, WeightConfig(tau=1e6)):
            assert np.abs(w.values - 0.25).max() < 1e-6

    def test_missing_reference(self, rng):
        ds = make_dataset(rng, 3, 4, 2)
        with pytest.raises(DataError, match="reference"):
            semi_soft_weights(ds, WeightConfig())


class TestHardTopk:
    def test_sorted_by_hand(self):
        w = hard_topk_weights(np.array([3.0, 1.0, 2.0]), k=2)
        assert w.values.tolist() == [0.5, 0.0, 0.5]

    def test_k_equals_m(self):
        w = hard_topk_weights(np.array([3.0, 1.0, 2.0]), k=3)
        assert np.allclose(w.values, 1 / 3)

    def test_tie_breaks_lowest_index(self):
        w = hard_topk_weights(np.array([1.0, 1.0, 1.0]), k=1)
        assert w.values.tolist() == [1.0, 0.0, 0.0]

    def test_k_out_of_range(self):
        with pytest.raises(DataError):
            hard_topk_weights(np.array([1.0, 2.0]), k=3)


class TestCombinedTopkSoft:
    def test_k_equals_m_plain_softmax(self, rng):
        s = rng.normal(size=6)
        w = combined_topk_soft_weights(s, tau=0.3, k=6)
        assert np.allclose(w.values, softmax(s, 0.3), atol=1e-15)

    def test_k1_one_hot(self):
        w = combined_topk_soft_weights(np.array([0.3, 0.9, 0.1]), tau=0.5, k=1)
        assert w.values.tolist() == [0.0, 1.0, 0.0]

    def test_survivor_softmax(self):
        tau = 0.7
        w = combined_topk_soft_weights(np.array([0.0, tau, -10 * tau]), tau=tau, k=2)
        assert w.values[2] == 0.0
        assert np.allclose(w.values[:2], TWO_POINT_SOFTMAX, atol=1e-12)


class TestMaskWeights:
    def test_normalization(self):
        w = mask_weights(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert w.values.tolist() == [0.5, 0.0, 0.0, 0.5]
        assert w.grid == (2, 2)

    def test_single_cell(self):
        w = mask_weights(np.array([[0.25, 0.0], [0.0, 0.0]]))
        assert w.values.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_all_zero_uniform_fallback(self):
        w = mask_weights(np.zeros((2, 2)))
        assert np.allclose(w.values, 0.25)


class TestMaxhOnehot:
    def test_enumerated_pair(self):
        ai, aj = maxh_onehot_weights(bag1d([0, 1], "i"), bag1d([0, 3], "j"))
        assert ai.values.tolist() == [0.0, 1.0]
        assert aj.values.tolist() == [1.0, 0.0]
        assert wa_distance(bag1d([0, 1], "i"), ai, bag1d([0, 3], "j"), aj) == pytest.approx(1.0)

    def test_identical_bags_zero(self, rng):
        bag = make_bag(rng, 4, 3)
        ai, aj = maxh_onehot_weights(bag, bag)
        assert wa_distance(bag, ai, bag, aj) == 0.0

    def test_single_instance(self):
        ai, aj = maxh_onehot_weights(bag1d([5]), bag1d([2]))
        assert ai.values.tolist() == [1.0]
        assert aj.values.tolist() == [1.0]

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_recovers_directed_hausdorff(self, seed):
        r = np.random.default_rng(seed)
        bi = Bag(id="i", embeddings=r.uniform(-1, 1, (r.integers(1, 7), 3)).astype(np.float32))
        bj = Bag(id="j", embeddings=r.uniform(-1, 1, (r.integers(1, 7), 3)).astype(np.float32))
        ai, aj = maxh_onehot_weights(bi, bj)
        got = wa_distance(bi, ai, bj, aj)
        want = directed_hausdorff(bi, bj, "max_min")
        assert got == pytest.approx(want, abs=1e-9)


class TestExport:
    def test_json_round_trip_exact(self, rng, tmp_path):
        ds = make_dataset(rng, 4, 5, 3)
        ws = unsup_soft_weights(ds, WeightConfig(tau=0.2))
        weights_to_json(ws, tmp_path / "w.json")
        table = weights_from_json(tmp_path / "w.json")
        for w in ws:
            assert table[w.bag_id].tobytes() == w.values.tobytes()

    def test_csv_long_format(self, rng, tmp_path):
        from mibag.weights import weights_to_csv

        ds = make_dataset(rng, 2, 3, 2)
        ws = [uniform_weights(b) for b in ds.bags]
        weights_to_csv(ws, tmp_path / "w.csv")
        lines = (tmp_path / "w.csv").read_text().strip().splitlines()
        assert lines[0] == "bag_id,index,weight"
        assert len(lines) == 1 + 2 * 3
        bag_id, index, value = lines[1].split(",")
        assert (bag_id, index) == ("b0", "0")
        assert float(value) == pytest.approx(1 / 3)
