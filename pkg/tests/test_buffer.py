"""Priority buffer: signal math, sum-tree sampling, weights, anneal."""

import numpy as np
import pytest

from drivevqa.buffer import (
    PriorityBuffer,
    SumTree,
    batch_priorities,
    diversities,
    normalized_losses,
    uncertainties,
)


class TestSignals:
    def test_normalized_losses_minmax(self):
        out = normalized_losses([2.0, 4.0, 3.0])
        assert np.allclose(out, [0.0, 1.0, 0.5])

    def test_normalized_losses_degenerate_is_half(self):
        out = normalized_losses([1.7, 1.7, 1.7])
        assert np.allclose(out, [0.5, 0.5, 0.5])

    def test_uncertainty_is_one_minus_mean_confidence(self):
        out = uncertainties([np.array([1.0, 0.5]), np.array([0.25])])
        assert np.allclose(out, [1.0 - 0.75, 0.75])

    def test_uncertainty_empty_sequence_counts_confident(self):
        assert uncertainties([np.array([])])[0] == 0.0

    def test_diversity_identical_embeddings_is_zero(self):
        e = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
        assert np.allclose(diversities(e), 0.0)

    def test_diversity_orthogonal_embeddings_is_one(self):
        assert np.allclose(diversities(np.eye(3)), 1.0)

    def test_diversity_singleton_batch_is_one(self):
        assert diversities(np.array([[5.0, 1.0]]))[0] == 1.0

    def test_diversity_opposed_pair_clamps_to_one(self):
        e = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert np.allclose(diversities(e), 1.0)

    def test_blend_weights(self):
        # losses [0,1], confidence 0.8 everywhere, orthogonal embeddings
        pri = batch_priorities(
            [1.0, 3.0],
            [np.array([0.8]), np.array([0.8])],
            np.eye(2),
        )
        assert np.allclose(pri, [0.5 * 0.0 + 0.3 * 0.2 + 0.2 * 1.0,
                                 0.5 * 1.0 + 0.3 * 0.2 + 0.2 * 1.0])


class TestSumTree:
    def test_prefix_lookup(self):
        tree = SumTree(4)
        for i, v in enumerate([1.0, 2.0, 3.0, 4.0]):
            tree.set(i, v)
        assert tree.total == 10.0
        assert tree.find(0.5) == 0
        assert tree.find(1.5) == 1
        assert tree.find(2.999) == 1
        assert tree.find(3.0) == 2
        assert tree.find(9.999) == 3

    def test_skips_zero_leaves(self):
        tree = SumTree(4)
        tree.set(1, 5.0)
        assert tree.find(0.0) == 1
        assert tree.find(4.999) == 1

    def test_sum_invariant_after_many_updates(self):
        rng = np.random.default_rng(0)
        tree = SumTree(64)
        for _ in range(20000):
            tree.set(int(rng.integers(64)), float(rng.random()))
        assert tree.max_relative_sum_error() <= 1e-9

    def test_rejects_negative(self):
        tree = SumTree(2)
        with pytest.raises(ValueError):
            tree.set(0, -1.0)


class TestBufferMutation:
    def test_new_records_enter_at_max_priority(self):
        buf = PriorityBuffer(capacity=8)
        buf.add("a")
        assert buf.priorities()[0] == 1.0
        buf.update([0], [0.3])
        buf.add("b")
        assert buf.priorities()[1] == 0.3
        buf.update([0], [0.9])
        buf.add("c")
        assert buf.priorities()[2] == 0.9

    def test_eviction_removes_lowest_priority(self):
        buf = PriorityBuffer(capacity=3)
        for name, pr in [("a", 0.5), ("b", 0.2), ("c", 0.8)]:
            buf.add(name, priority=pr)
        buf.add("d", priority=0.6)
        assert buf.items() == ["a", "d", "c"]
        assert len(buf) == 3

    def test_update_out_of_range_raises(self):
        buf = PriorityBuffer(capacity=4)
        buf.add("a")
        with pytest.raises(IndexError):
            buf.update([3], [0.5])

    def test_empty_and_zero_priority_sampling_raise(self):
        buf = PriorityBuffer(capacity=4)
        with pytest.raises(ValueError):
            buf.sample(1)
        buf.add("a", priority=0.0)
        with pytest.raises(ValueError):
            buf.sample(1)


class TestSampling:
    def test_draw_frequencies_match_distribution(self):
        # ten records, 1e5 draws: empirical frequency within 0.01 absolute
        buf = PriorityBuffer(capacity=10, seed=123)
        priorities = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.85, 1.0]
        for i, pr in enumerate(priorities):
            buf.add(i, priority=pr)
        expected = buf.probabilities()
        counts = np.zeros(10)
        draws = 100_000
        slots, _, _, _ = buf.sample(draws)
        for s in slots:
            counts[s] += 1
        assert np.abs(counts / draws - expected).max() < 0.01

    def test_probabilities_follow_alpha_power(self):
        buf = PriorityBuffer(capacity=4, alpha=0.6)
        pr = np.array([0.1, 0.4, 0.9, 0.25])
        for i, p in enumerate(pr):
            buf.add(i, priority=float(p))
        expected = pr ** 0.6 / (pr ** 0.6).sum()
        assert np.allclose(buf.probabilities(), expected, atol=1e-12)

    def test_sampled_items_align_with_slots(self):
        buf = PriorityBuffer(capacity=4, seed=7)
        for i in range(4):
            buf.add(f"rec{i}", priority=0.2 + 0.2 * i)
        slots, items, probs, weights = buf.sample(32)
        assert items == [f"rec{s}" for s in slots]
        assert probs.shape == weights.shape == (32,)

    def test_uniform_priorities_give_unit_weights(self):
        buf = PriorityBuffer(capacity=6, seed=3)
        for i in range(6):
            buf.add(i, priority=0.7)
        _, _, probs, weights = buf.sample(24)
        assert np.allclose(probs, 1.0 / 6.0)
        assert np.allclose(weights, 1.0)

    def test_raw_weights_skip_normalization(self):
        buf = PriorityBuffer(capacity=4, seed=5, normalize_weights=False)
        for i, p in enumerate([0.2, 0.4, 0.6, 0.8]):
            buf.add(i, priority=p)
        slots, _, probs, weights = buf.sample(16)
        beta = buf.beta
        assert np.allclose(weights, ((1.0 / 4) * (1.0 / probs)) ** beta)

    def test_capacity_as_population_switch(self):
        buf = PriorityBuffer(capacity=8, seed=5, normalize_weights=False,
                             n_from_fill=False)
        for i in range(4):
            buf.add(i, priority=0.5)
        _, _, probs, weights = buf.sample(8)
        assert np.allclose(weights, ((1.0 / 8) * (1.0 / probs)) ** buf.beta)


class TestAnneal:
    def test_beta_reaches_one_exactly_at_600_steps(self):
        buf = PriorityBuffer(capacity=2)
        assert buf.beta == 0.4
        for _ in range(599):
            buf.anneal_beta()
        assert buf.beta < 1.0
        assert buf.anneal_beta() == 1.0
        assert buf.beta == 1.0
        buf.anneal_beta()
        assert buf.beta == 1.0

    def test_beta_is_affine_in_count(self):
        buf = PriorityBuffer(capacity=2)
        for _ in range(100):
            buf.anneal_beta()
        assert buf.beta == pytest.approx(0.5, abs=1e-15)


class TestBiasCorrection:
    def test_full_beta_enumeration_matches_uniform_mean(self):
        # with beta=1 and raw weights, sum_i P_i * w_i * g_i == mean(g)
        buf = PriorityBuffer(capacity=3, normalize_weights=False)
        grads = np.array([0.9, -2.4, 5.1])
        for i, p in enumerate([0.15, 0.55, 0.95]):
            buf.add(i, priority=p)
        for _ in range(600):
            buf.anneal_beta()
        probs = buf.probabilities()
        weights = (1.0 / (3 * probs)) ** buf.beta
        estimate = float((probs * weights * grads).sum())
        assert abs(estimate - grads.mean()) <= 1e-10


class TestPersistence:
    def test_state_roundtrip_resumes_stream(self):
        buf = PriorityBuffer(capacity=5, seed=11)
        for i, p in enumerate([0.3, 0.6, 0.9, 0.45, 0.75]):
            buf.add(i, priority=p)
        for _ in range(17):
            buf.anneal_beta()
        buf.sample(9)
        clone = PriorityBuffer.from_state_dict(buf.state_dict())
        assert clone.beta == buf.beta
        assert np.array_equal(clone.priorities(), buf.priorities())
        assert clone.items() == buf.items()
        a = buf.sample(20)
        b = clone.sample(20)
        assert np.array_equal(a[0], b[0])
        assert np.allclose(a[3], b[3])
