import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qe.calib import (CoOccurrence, OutlierProfile, channel_frequency, channel_stats,
                      co_occurrence, importance_vector, npmi_similarity,
                      partition_channels, synth_calibration, token_topk, topk_sets)
from qe.errors import InvalidInputError


class TestImportance:
    def test_hand_example(self):
        w = importance_vector(np.array([[1.0, -1.0], [3.0, 1.0]]))
        assert np.array_equal(w, [2.0, 1.0])

    def test_identity(self):
        assert np.allclose(importance_vector(np.eye(4)), 0.25)

    def test_zero(self):
        assert not importance_vector(np.zeros((3, 5))).any()


class TestTokenTopk:
    def test_hand_example(self):
        got = token_topk(np.array([0.5, 2.0]), np.array([2.0, 1.0]), 1)
        assert got.tolist() == [1]

    def test_k_equals_d_in(self):
        got = token_topk(np.ones(5), np.ones(5), 5)
        assert got.tolist() == [0, 1, 2, 3, 4]

    def test_all_ties_take_lowest_indices(self):
        got = token_topk(np.zeros(6), np.ones(6), 3)
        assert got.tolist() == [0, 1, 2]

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            d = int(rng.integers(2, 20))
            k = int(rng.integers(1, d + 1))
            x = rng.normal(size=d)
            w = np.abs(rng.normal(size=d))
            scores = np.abs(x) * w
            brute = sorted(sorted(range(d), key=lambda c: (-scores[c], c))[:k])
            assert token_topk(x, w, k).tolist() == brute

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(16, 10))
        w = np.abs(rng.normal(size=10))
        sets = topk_sets(x, w, 4)
        for t in range(16):
            assert np.array_equal(sets[t], token_topk(x[t], w, 4))


class TestChannelFrequency:
    def test_hand_example(self):
        freq = channel_frequency([{0, 1}, {0, 2}, {0, 3}, {1, 2}], k=2, d_in=4)
        assert freq[0] == pytest.approx(0.75)
        assert freq[3] == pytest.approx(0.25)

    def test_always_present_channel(self):
        freq = channel_frequency([{5, 1}, {5, 2}, {5, 3}], k=2, d_in=8)
        assert freq[5] == pytest.approx(1.0)

    def test_single_token(self):
        freq = channel_frequency([{5, 9}], k=2, d_in=12)
        assert freq == {5: 1.0, 9: 1.0}

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            channel_frequency([], k=2, d_in=4)

    def test_sums_to_k_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            d = int(rng.integers(4, 30))
            k = int(rng.integers(1, d + 1))
            n_tokens = int(rng.integers(1, 40))
            sets = [set(rng.choice(d, size=k, replace=False).tolist())
                    for _ in range(n_tokens)]
            freq = channel_frequency(sets, k, d)
            assert abs(sum(freq.values()) - k) <= 1e-12
            assert all(0.0 < f <= k for f in freq.values())


class TestPartition:
    def test_hand_example(self):
        shared, routed = partition_channels({2: 0.9, 0: 0.7, 3: 0.3, 1: 0.1},
                                            k=1, n_experts=2)
        assert shared == [2]
        assert routed == [0, 3]

    def test_ties_take_lowest_index(self):
        shared, _ = partition_channels({3: 0.5, 1: 0.5, 0: 0.5, 2: 0.5},
                                       k=2, n_experts=1)
        assert shared == [0, 1]

    def test_truncation_when_few_observed(self):
        shared, routed = partition_channels({0: 1.0, 1: 1.0}, k=2, n_experts=3)
        assert shared == [0, 1]
        assert routed == []

    def test_empty_freq_rejected(self):
        with pytest.raises(InvalidInputError):
            partition_channels({}, k=1, n_experts=1)

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        freq = {int(c): float(f) for c, f in
                zip(rng.permutation(40), rng.uniform(0, 1, 40))}
        first = partition_channels(dict(freq), 5, 3)
        for _ in range(5):
            shuffled = {c: freq[c] for c in rng.permutation(list(freq))}
            assert partition_channels(shuffled, 5, 3) == first


class TestCoOccurrence:
    def test_hand_example(self):
        occ = co_occurrence([{0, 3}, {3}], [0, 3])
        assert occ.matrix.tolist() == [[1, 1], [0, 1]]

    def test_absent_channel_column_zero(self):
        occ = co_occurrence([{1}, {2}], [0, 1])
        assert occ.matrix[:, 0].tolist() == [0, 0]

    def test_superset_rows_all_ones(self):
        occ = co_occurrence([{0, 1, 2}, {0, 1, 2, 3}], [0, 1])
        assert occ.matrix.all()

    def test_column_sums_are_counts(self):
        rng = np.random.default_rng(5)
        sets = [set(rng.choice(12, size=4, replace=False).tolist()) for _ in range(30)]
        routed = [0, 3, 7, 11]
        occ = co_occurrence(sets, routed)
        for i, c in enumerate(routed):
            assert int(occ.matrix[:, i].sum()) == sum(c in s for s in sets)


class TestNpmi:
    def test_identical_columns(self):
        m = np.array([[1, 1], [1, 1], [0, 0], [0, 0]], dtype=np.uint8)
        s = npmi_similarity(CoOccurrence(matrix=m, channels=[0, 1]))
        assert s[0, 1] == pytest.approx(1.0)

    def test_independent_columns(self):
        m = np.zeros((4, 2), dtype=np.uint8)
        m[[1, 2], 0] = 1
        m[[2, 3], 1] = 1
        s = npmi_similarity(CoOccurrence(matrix=m, channels=[0, 1]))
        assert s[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_columns(self):
        m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        s = npmi_similarity(CoOccurrence(matrix=m, channels=[0, 1]))
        assert s[0, 1] == -1.0

    def test_always_on_columns(self):
        m = np.ones((3, 2), dtype=np.uint8)
        s = npmi_similarity(CoOccurrence(matrix=m, channels=[0, 1]))
        assert s[0, 1] == 1.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40)
    def test_range_symmetry_diagonal(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.uniform(size=(int(rng.integers(1, 20)), int(rng.integers(2, 8))))
             < 0.4).astype(np.uint8)
        s = npmi_similarity(CoOccurrence(matrix=m, channels=list(range(m.shape[1]))))
        assert (s >= -1.0 - 1e-12).all() and (s <= 1.0 + 1e-12).all()
        assert np.array_equal(s, s.T)
        assert np.array_equal(np.diag(s), np.ones(m.shape[1]))

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(29)
        m = (rng.uniform(size=(17, 5)) < 0.5).astype(np.uint8)
        s = npmi_similarity(CoOccurrence(matrix=m, channels=list(range(5))))
        n = m.shape[0]
        for i in range(5):
            for j in range(5):
                if i == j:
                    continue
                pi = m[:, i].sum() / n
                pj = m[:, j].sum() / n
                pij = (m[:, i] * m[:, j]).sum() / n
                if pij == 0:
                    expect = -1.0
                elif pij == 1:
                    expect = 1.0
                else:
                    expect = np.log(pij / (pi * pj)) / (-np.log(pij))
                assert s[i, j] == pytest.approx(expect, abs=1e-12)


class TestSynthCalibration:
    def test_no_outliers_flat_frequency(self):
        profile = OutlierProfile()
        x, labels = synth_calibration(32, 4000, 2, seed=0, profile=profile)
        stats = channel_stats(np.ones((8, 32)), x, k=4, n_experts=2)
        values = np.array([stats.freq.get(c, 0.0) for c in range(32)])
        expect = 4.0 / 32.0
        assert np.abs(values - expect).max() < 3.0 * expect  # no heavy tail

    def test_always_hot_channels_have_unit_frequency(self):
        profile = OutlierProfile(always_hot=4, always_gain=16.0)
        x, _ = synth_calibration(32, 512, 2, seed=1, profile=profile)
        rng = np.random.default_rng(2)
        w = rng.normal(size=(16, 32))
        stats = channel_stats(w, x, k=4, n_experts=2)
        top4 = stats.ordered_channels[:4]
        assert all(stats.freq[c] == pytest.approx(1.0) for c in top4)

    def test_deterministic(self):
        profile = OutlierProfile(always_hot=2, modality_hot=3, token_hot=1)
        a, la = synth_calibration(16, 8, 2, seed=5, profile=profile)
        b, lb = synth_calibration(16, 8, 2, seed=5, profile=profile)
        assert a.tobytes() == b.tobytes()
        assert np.array_equal(la, lb)

    def test_modality_blocks(self):
        _, labels = synth_calibration(8, 6, 3, seed=0, profile=OutlierProfile())
        assert labels.tolist() == [0, 0, 1, 1, 2, 2]

    def test_divisibility_required(self):
        with pytest.raises(InvalidInputError):
            synth_calibration(8, 7, 2, seed=0, profile=OutlierProfile())

    def test_heavy_tail_with_structure(self):
        profile = OutlierProfile(always_hot=4, always_gain=16.0,
                                 modality_hot=6, modality_gain=16.0,
                                 token_hot=2, token_gain=6.0)
        x, _ = synth_calibration(64, 1024, 2, seed=3, profile=profile)
        rng = np.random.default_rng(4)
        stats = channel_stats(rng.normal(size=(64, 64)), x, k=8, n_experts=4)
        values = sorted(stats.freq.values(), reverse=True)
        # A few near-1 channels and a long small-frequency tail.
        assert values[0] > 0.9
        assert values[len(values) // 2] < 0.3
