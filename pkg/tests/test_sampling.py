import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isfedavg import oracles
from isfedavg.exceptions import (
    BatchTooLarge,
    EmptyProbabilities,
    InclusionOverflow,
    NegativeEntry,
    NotNormalized,
    TooLargeToEnumerate,
)
from isfedavg.sampling import (
    cap_inclusion,
    exact_inclusion_probabilities,
    pair_inclusion_probabilities,
    sample_with_replacement,
    sample_with_replacement_batch,
    sequential_sample_without_replacement,
    systematic_sample_batch,
    systematic_sample_without_replacement,
    validate_probabilities,
)

BALLS = [1 / 3, 1 / 6, 1 / 3, 1 / 6]
SKEWED = [0.5, 0.25, 0.125, 0.125]


def probability_vectors(min_size=1, max_size=6):
    return st.lists(
        st.floats(0.05, 1.0), min_size=min_size, max_size=max_size
    ).map(lambda v: np.array(v) / np.sum(v))


class TestValidate:
    def test_accepts_simplex_point(self):
        np.testing.assert_allclose(validate_probabilities(BALLS), BALLS)

    def test_singleton(self):
        assert validate_probabilities([1.0]).tolist() == [1.0]

    def test_not_normalized(self):
        with pytest.raises(NotNormalized):
            validate_probabilities([0.5, 0.6])

    def test_negative(self):
        with pytest.raises(NegativeEntry):
            validate_probabilities([1.5, -0.5])

    def test_empty(self):
        with pytest.raises(EmptyProbabilities):
            validate_probabilities([])

    def test_tiny_drift_is_renormalized(self):
        p = validate_probabilities([0.5, 0.5 + 1e-13])
        assert abs(p.sum() - 1.0) < 1e-15


class TestWithReplacement:
    def test_degenerate(self):
        assert sample_with_replacement(np.array([1.0, 0, 0]), 3, 0).indices.tolist() == [0, 0, 0]

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        draws = sample_with_replacement_batch(np.full(4, 0.25), 1, 100_000, rng).ravel()
        freq = np.bincount(draws, minlength=4) / draws.size
        se = np.sqrt(0.25 * 0.75 / draws.size)
        assert np.all(np.abs(freq - 0.25) < 3 * se)

    def test_single_draw_frequencies(self):
        rng = np.random.default_rng(2)
        p = np.array(SKEWED)
        counts = np.zeros(4)
        for _ in range(20_000):
            counts[sample_with_replacement(p, 1, rng).indices[0]] += 1
        se = np.sqrt(p * (1 - p) / 20_000)
        assert np.all(np.abs(counts / 20_000 - p) < 3 * se)

    def test_deterministic(self):
        p = np.array(BALLS)
        a = sample_with_replacement(p, 5, 7).indices
        b = sample_with_replacement(p, 5, 7).indices
        assert a.tolist() == b.tolist()


class TestSystematic:
    def test_interval_rule_example(self):
        draw = systematic_sample_without_replacement(
            np.array(SKEWED), 2, shuffle=False, offset=0.3
        )
        assert draw.indices.tolist() == [0, 1]
        assert draw.replacement is False

    def test_boundary_goes_right(self):
        # d + 1 = 1.5 sits exactly on the end of element 1's interval
        draw = systematic_sample_without_replacement(
            np.array(SKEWED), 2, shuffle=False, offset=0.5
        )
        assert draw.indices.tolist() == [0, 2]

    def test_full_selection(self):
        draw = systematic_sample_without_replacement(np.full(5, 0.2), 5, 0)
        assert sorted(draw.indices.tolist()) == [0, 1, 2, 3, 4]

    def test_overflow(self):
        with pytest.raises(InclusionOverflow):
            systematic_sample_without_replacement(np.array([0.7, 0.3]), 2, 0)

    def test_too_many(self):
        with pytest.raises(BatchTooLarge):
            systematic_sample_without_replacement(np.array([0.5, 0.5]), 3, 0)

    @pytest.mark.parametrize("shuffle", [False, True])
    def test_monte_carlo_inclusion(self, shuffle):
        p = np.array(SKEWED)
        trials = 100_000
        draws = systematic_sample_batch(p, 2, trials, np.random.default_rng(3), shuffle=shuffle)
        freq = np.array([(draws == j).any(axis=1).mean() for j in range(4)])
        target = 2 * p
        se = np.sqrt(np.maximum(target * (1 - target), 1e-300) / trials)
        assert freq[0] == 1.0
        assert np.all(np.abs(freq - target) <= 3 * se + 1e-15)

    def test_single_and_batch_agree_in_distribution(self):
        p = np.array([0.3, 0.1, 0.2, 0.25, 0.15])
        rng = np.random.default_rng(4)
        single = np.zeros(5)
        for _ in range(20_000):
            single[systematic_sample_without_replacement(p, 2, rng).indices] += 1
        single /= 20_000
        np.testing.assert_allclose(single, 2 * p, atol=0.015)

    @settings(max_examples=50, deadline=None)
    @given(probability_vectors(2, 8), st.integers(1, 4), st.integers(0, 2**31))
    def test_distinct_indices(self, p, size, seed):
        size = min(size, len(p))
        p = cap_inclusion(p, size)
        draw = systematic_sample_without_replacement(p, size, seed)
        assert len(set(draw.indices.tolist())) == size
        assert draw.indices.max() < len(p)
        batch = systematic_sample_batch(p, size, 50, seed)
        assert all(len(set(row)) == size for row in batch.tolist())

    def test_deterministic(self):
        p = np.array([0.3, 0.1, 0.2, 0.25, 0.15])
        a = systematic_sample_without_replacement(p, 2, 11).indices
        b = systematic_sample_without_replacement(p, 2, 11).indices
        assert a.tolist() == b.tolist()


class TestSequential:
    def test_exhaustive(self):
        draw = sequential_sample_without_replacement(np.array(BALLS), 4, 0)
        assert sorted(draw.indices.tolist()) == [0, 1, 2, 3]

    def test_batch_too_large(self):
        with pytest.raises(BatchTooLarge):
            sequential_sample_without_replacement(np.array(BALLS), 5, 0)

    def test_monte_carlo_matches_exact(self):
        rng = np.random.default_rng(5)
        p = np.array(BALLS)
        hits = np.zeros(4)
        for _ in range(20_000):
            hits[sequential_sample_without_replacement(p, 2, rng).indices] += 1
        np.testing.assert_allclose(hits / 20_000, [19 / 30, 11 / 30, 19 / 30, 11 / 30], atol=0.012)


class TestExactInclusion:
    def test_balls_example(self):
        # hand evaluation of the two-trial sum for ball 0:
        # sum_n pi_0 pi_n / (1 - pi_0) + pi_n pi_0 / (1 - pi_n)
        pi = BALLS
        hand = sum(pi[0] * pi[n] / (1 - pi[0]) + pi[n] * pi[0] / (1 - pi[n]) for n in (1, 2, 3))
        assert abs(hand - 19 / 30) < 1e-15
        incl = exact_inclusion_probabilities(np.array(BALLS), 2, "sequential")
        np.testing.assert_allclose(incl, [19 / 30, 11 / 30, 19 / 30, 11 / 30], atol=1e-12)
        assert abs(incl.sum() - 2) < 1e-10

    def test_systematic_closed_form(self):
        incl = exact_inclusion_probabilities(np.array(SKEWED), 2, "systematic")
        np.testing.assert_allclose(incl, [1.0, 0.5, 0.25, 0.25])

    @pytest.mark.parametrize("scheme", ["sequential", "systematic"])
    def test_full_batch(self, scheme):
        np.testing.assert_allclose(exact_inclusion_probabilities(np.full(4, 0.25), 4, scheme), 1.0)

    def test_uniform_sequential(self):
        incl = exact_inclusion_probabilities(np.full(7, 1 / 7), 3, "sequential")
        np.testing.assert_allclose(incl, 3 / 7, atol=1e-12)

    def test_too_large(self):
        with pytest.raises(TooLargeToEnumerate):
            exact_inclusion_probabilities(np.full(13, 1 / 13), 2, "sequential")

    def test_twelve_elements_is_fine(self):
        p = np.arange(1, 13, dtype=float)
        p /= p.sum()
        assert abs(exact_inclusion_probabilities(p, 5, "sequential").sum() - 5) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(probability_vectors(1, 6), st.integers(1, 3))
    def test_matches_enumeration(self, p, size):
        size = min(size, len(p))
        oracle = oracles.inclusion_from_outcomes(
            oracles.enumerate_outcomes(p, size, "sequential"), len(p)
        )
        exact = exact_inclusion_probabilities(p, size, "sequential")
        np.testing.assert_allclose(exact, oracle, atol=1e-12)
        assert abs(exact.sum() - size) < 1e-10
        q = cap_inclusion(p, size)
        assert abs(exact_inclusion_probabilities(q, size, "systematic").sum() - size) < 1e-10


class TestPairInclusion:
    @settings(max_examples=40, deadline=None)
    @given(probability_vectors(1, 6), st.integers(1, 3))
    def test_systematic_matches_outcomes(self, p, size):
        size = min(size, len(p))
        p = cap_inclusion(p, size)
        oracle = oracles.pair_inclusion_from_outcomes(
            oracles.enumerate_outcomes(p, size, "systematic"), len(p)
        )
        np.testing.assert_allclose(pair_inclusion_probabilities(p, size, "systematic"), oracle, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(probability_vectors(1, 6), st.integers(1, 3))
    def test_sequential_matches_outcomes(self, p, size):
        size = min(size, len(p))
        oracle = oracles.pair_inclusion_from_outcomes(
            oracles.enumerate_outcomes(p, size, "sequential"), len(p)
        )
        np.testing.assert_allclose(pair_inclusion_probabilities(p, size, "sequential"), oracle, atol=1e-12)


class TestCap:
    def test_caps_and_preserves_order(self):
        p = np.array([0.6, 0.2, 0.1, 0.1])
        q = cap_inclusion(p, 2)
        assert abs(q.sum() - 1) < 1e-12
        assert q[0] == pytest.approx(0.5)
        np.testing.assert_allclose(q[1:], [0.25, 0.125, 0.125])
        assert np.all(2 * q <= 1 + 1e-12)

    def test_cascading(self):
        p = np.array([0.4, 0.35, 0.15, 0.05, 0.05])
        q = cap_inclusion(p, 3)
        assert np.all(3 * q <= 1 + 1e-12)
        assert abs(q.sum() - 1) < 1e-12
        assert np.all(np.diff(q) <= 1e-15)

    def test_infeasible(self):
        with pytest.raises(InclusionOverflow):
            cap_inclusion(np.array([0.9, 0.1, 0.0]), 3)
