"""Router semantics: scoring, budget, tie-breaks, and pruning-by-removal."""

import numpy as np
import pytest

from drivevqa.router import (
    RouterConfig, TokenRouter, RoutedSequence, position_prior, compact_batch,
)


def reference_route(emb, valid, k_max, cb=1.2):
    """Independent brute-force reference for the routing contract."""
    idx = [i for i in range(len(valid)) if valid[i]]
    L = len(idx)
    if L == 0:
        return [], []
    mags = [float(np.linalg.norm(np.asarray(emb[i], dtype=np.float64))) for i in idx]
    pri = [cb if (L / 4 <= r <= 3 * L / 4) else 1.0 for r in range(1, L + 1)]
    raw = [0.5 * m + 0.5 * p for m, p in zip(mags, pri)]
    lo, hi = min(raw), max(raw)
    scores = [1.0] * L if hi - lo < 1e-12 else [(x - lo) / (hi - lo) for x in raw]
    k = min(k_max, L)
    ranked = sorted(range(L), key=lambda j: (-scores[j], j))[:k]
    kept = sorted(idx[j] for j in ranked)
    return kept, scores


class TestScoring:
    def test_scores_are_normalized_to_unit_interval(self):
        rng = np.random.default_rng(0)
        r = TokenRouter()
        s = r.score(rng.random((12, 16)))
        assert s.min() == 0.0 and s.max() == 1.0

    def test_degenerate_scores_become_ones(self):
        r = TokenRouter()
        emb = np.ones((5, 8))
        emb *= 0.0  # zero magnitude everywhere
        # position prior alone varies, so force full degeneracy via L=1
        assert r.score(np.zeros((1, 8))).tolist() == [1.0]

    def test_position_prior_window_is_inclusive_real_bounds(self):
        # L=4: bounds [1.0, 3.0] -> ranks 1,2,3 boosted, 4 not
        np.testing.assert_array_equal(position_prior(4), [1.2, 1.2, 1.2, 1.0])
        # L=8: bounds [2.0, 6.0] -> ranks 2..6
        np.testing.assert_array_equal(
            position_prior(8), [1.0, 1.2, 1.2, 1.2, 1.2, 1.2, 1.0, 1.0])
        # L=10: bounds [2.5, 7.5] -> ranks 3..7
        np.testing.assert_array_equal(
            position_prior(10), [1.0, 1.0, 1.2, 1.2, 1.2, 1.2, 1.2, 1.0, 1.0, 1.0])

    def test_magnitude_dominates_when_prior_flat(self):
        r = TokenRouter(RouterConfig(max_tokens=2, center_boost=1.0))
        emb = np.zeros((6, 4))
        emb[1] = 3.0
        emb[4] = 5.0
        routed = r.route(emb)
        assert routed.kept_positions.tolist() == [1, 4]


class TestSelection:
    def test_keep_budget(self):
        r = TokenRouter(RouterConfig(max_tokens=4))
        routed = r.route(np.random.default_rng(0).random((10, 8)))
        assert routed.kept_count == 4

    def test_short_sequences_keep_everything(self):
        r = TokenRouter(RouterConfig(max_tokens=64))
        routed = r.route(np.random.default_rng(0).random((5, 8)))
        assert routed.kept_positions.tolist() == [0, 1, 2, 3, 4]

    def test_ties_prefer_earlier_positions(self):
        r = TokenRouter(RouterConfig(max_tokens=3))
        # equal magnitudes: only the middle-half prior differentiates; inside
        # the boosted group everything ties, so earliest boosted ranks win
        routed = r.route(np.ones((8, 4)))
        assert routed.kept_positions.tolist() == [1, 2, 3]

    def test_pad_rows_never_survive(self):
        r = TokenRouter(RouterConfig(max_tokens=8))
        emb = np.random.default_rng(1).random((6, 4)) + 5.0
        valid = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
        routed = r.route(emb, valid)
        assert set(routed.kept_positions.tolist()) <= {0, 1, 3, 5}
        assert routed.original_length == 4

    def test_empty_sequence(self):
        r = TokenRouter()
        routed = r.route(np.zeros((0, 8)))
        assert routed.kept_count == 0 and routed.scores.size == 0

    def test_positions_strictly_increasing(self):
        r = TokenRouter(RouterConfig(max_tokens=6))
        routed = r.route(np.random.default_rng(2).random((20, 8)))
        diffs = np.diff(routed.kept_positions)
        assert np.all(diffs > 0)

    def test_invalid_budget_rejected(self):
        with pytest.raises(ValueError):
            RouterConfig(max_tokens=0)


class TestPruneByRemoval:
    def test_compact_batch_removes_pruned_tokens(self):
        r = TokenRouter(RouterConfig(max_tokens=3))
        rng = np.random.default_rng(3)
        ids = rng.integers(3, 50, size=(2, 7))
        emb = rng.random((2, 7, 8))
        valid = np.ones((2, 7), dtype=bool)
        valid[1, 5:] = False
        routed = r.route_batch(emb, valid)
        kept_ids, mask = compact_batch(ids, routed, pad_id=0)
        assert kept_ids.shape[1] == max(rr.kept_count for rr in routed)
        for i, rr in enumerate(routed):
            np.testing.assert_array_equal(
                kept_ids[i, :rr.kept_count], ids[i, rr.kept_positions])
            assert mask[i, :rr.kept_count].all()
            assert not mask[i, rr.kept_count:].any()
            assert (kept_ids[i, rr.kept_count:] == 0).all()

    def test_sequence_shortens(self):
        r = TokenRouter(RouterConfig(max_tokens=2))
        ids = np.arange(3, 12)[None, :]
        emb = np.random.default_rng(0).random((1, 9, 4))
        routed = r.route_batch(emb, np.ones((1, 9), dtype=bool))
        kept_ids, mask = compact_batch(ids, routed)
        assert kept_ids.shape == (1, 2) and mask.all()


class TestPropertySweep:
    def test_two_thousand_random_sequences_match_reference(self):
        rng = np.random.default_rng(42)
        router = TokenRouter(RouterConfig(max_tokens=8))
        for case in range(2000):
            L = int(rng.integers(0, 24))
            emb = rng.normal(0, rng.uniform(0.1, 3.0), size=(L, 6))
            if L and rng.random() < 0.3:
                emb[:] = emb[0]  # force magnitude ties
            valid = rng.random(L) > 0.2 if L else np.zeros(0, dtype=bool)
            got = router.route(emb, valid)
            kept_ref, scores_ref = reference_route(emb, valid, 8)
            assert got.kept_positions.tolist() == kept_ref, f"case {case}"
            np.testing.assert_allclose(got.scores, scores_ref, atol=1e-12,
                                       err_msg=f"case {case}")
            assert got.kept_count == min(8, int(valid.sum()))
            if got.kept_count:
                assert np.all(np.diff(got.kept_positions) > 0)
                assert valid[got.kept_positions].all()
