"""Metric oracles: three-pair corpus worked out from the definitions."""

import math

import pytest

from drivevqa.metrics import (
    bleu4,
    cider,
    evaluate_pairs,
    meteor_simplified,
    rouge_l,
)

# Worked corpus. Token counts below are derived by hand:
#   pair 1: cand [the car stops]      ref [the car stops]
#   pair 2: cand [a red sign]         ref [a red stop sign]
#   pair 3: cand [turn left now]      ref [turn right ahead]
REFS = ["the car stops", "a red stop sign", "turn right ahead"]
CANDS = ["the car stops", "a red sign", "turn left now"]


class TestOracles:
    def test_bleu4_matches_hand_counts(self):
        # clipped matches / totals per order:
        #   1-gram 7/9, 2-gram 3/6, 3-gram 1/3, 4-gram 0/0
        # smoothed: 8/10, 4/7, 2/4, 1/1; lengths: cand 9, ref 10
        want = math.exp(1.0 - 10.0 / 9.0) * (
            (8 / 10) * (4 / 7) * (2 / 4) * 1.0) ** 0.25
        assert bleu4(REFS, CANDS) == pytest.approx(want, abs=1e-6)

    def test_rouge_l_matches_hand_lcs(self):
        beta2 = 1.44
        # pair LCS: 3/3-3, 3/3-4, 1/3-3
        f1 = 1.0
        f2 = (1 + beta2) * 1.0 * 0.75 / (0.75 + beta2 * 1.0)
        f3 = (1 + beta2) * (1 / 3) * (1 / 3) / ((1 / 3) + beta2 * (1 / 3))
        want = (f1 + f2 + f3) / 3.0
        assert rouge_l(REFS, CANDS) == pytest.approx(want, abs=1e-6)

    def test_cider_matches_hand_cosines(self):
        # every n-gram here appears in at most one reference, so idf = log 3
        # cancels in each cosine; the surviving geometry:
        #   pair 1: cos 1 for n = 1..3, no 4-grams -> 2.5 * 3
        #   pair 2: n=1 cos = 3/(sqrt(3)*2) = sqrt(3)/2, n=2 cos = 1/sqrt(6)
        #   pair 3: n=1 cos = 1/3
        s1 = 10.0 * 3 / 4
        s2 = 10.0 * (math.sqrt(3) / 2 + 1 / math.sqrt(6)) / 4
        s3 = 10.0 * (1 / 3) / 4
        want = (s1 + s2 + s3) / 3.0
        assert cider(REFS, CANDS) == pytest.approx(want, abs=1e-6)

    def test_meteor_matches_hand_counts(self):
        # stemmed matches: 3/3-3, 3/3-4, 1/3-3
        m1 = 1.0
        m2 = 10.0 * 1.0 * 0.75 / (0.75 + 9.0)
        m3 = 10.0 * (1 / 3) * (1 / 3) / ((1 / 3) + 9.0 * (1 / 3))
        want = (m1 + m2 + m3) / 3.0
        assert meteor_simplified(REFS, CANDS) == pytest.approx(want, abs=1e-6)


class TestIdentity:
    def test_identical_pairs_score_one(self):
        refs = ["stop fully before the line", "the sign is red"]
        assert bleu4(refs, refs) == pytest.approx(1.0, abs=1e-12)
        assert rouge_l(refs, refs) == pytest.approx(1.0, abs=1e-12)

    def test_meteor_identity(self):
        refs = ["slow down near the crossing"]
        assert meteor_simplified(refs, refs) == pytest.approx(1.0, abs=1e-12)


class TestEdgeCases:
    def test_empty_candidate_scores_zero(self):
        assert bleu4(["a b c"], [""]) == 0.0
        assert rouge_l(["a b c"], [""]) == 0.0
        assert meteor_simplified(["a b c"], [""]) == 0.0

    def test_disjoint_pair(self):
        assert rouge_l(["alpha beta"], ["gamma delta"]) == 0.0
        assert meteor_simplified(["alpha beta"], ["gamma delta"]) == 0.0

    def test_stemmer_alignment(self):
        # "stopping" and "stopped" stem to different strings, but
        # "stops"/"stop" align
        assert meteor_simplified(["the car stop"], ["the car stops"]) == \
            pytest.approx(1.0, abs=1e-12)

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            bleu4(["a"], ["a", "b"])

    def test_evaluate_pairs_keys(self):
        out = evaluate_pairs(REFS, CANDS)
        assert set(out) == {"bleu4", "rouge_l", "cider", "meteor_simplified"}

    def test_punctuation_is_tokenized(self):
        # "line." vs "line ." must match once tokenized
        assert rouge_l(["stop at the line ."], ["stop at the line."]) == \
            pytest.approx(1.0, abs=1e-12)
