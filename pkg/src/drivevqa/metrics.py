"""Text-overlap metrics for generated answers.

All metrics tokenize with the shared whitespace+punctuation scheme and
operate on (reference, candidate) pairs; corpus scores are reported from
`evaluate_pairs`. Implemented from their standard definitions:

* bleu4: corpus-level, add-one smoothed modified n-gram precisions for
  n = 1..4 with the usual brevity penalty.
* rouge_l: longest-common-subsequence F-score with beta = 1.2, averaged
  over pairs.
* cider: TF-IDF cosine over 1..4-grams, idf = log(N) - log(max(1, df))
  with df counted over the reference corpus, scaled by 10, averaged over
  pairs and n-gram orders.
* meteor_simplified: stemmed unigram matching scored by 10PR / (R + 9P);
  the stemmer strips one of ing/ed/es/s when at least three characters
  remain.
"""

import math
from collections import Counter

from .tokenizer import tokenize

ROUGE_BETA = 1.2
_SUFFIXES = ("ing", "ed", "es", "s")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(references, candidates):
    """Corpus BLEU with add-one smoothing on the aggregated counts."""
    if len(references) != len(candidates):
        raise ValueError("reference/candidate count mismatch")
    matches = [0] * 4
    totals = [0] * 4
    ref_len = cand_len = 0
    for ref, cand in zip(references, candidates):
        r, c = tokenize(ref), tokenize(cand)
        ref_len += len(r)
        cand_len += len(c)
        for n in range(1, 5):
            cn = _ngrams(c, n)
            rn = _ngrams(r, n)
            matches[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            totals[n - 1] += max(0, len(c) - n + 1)
    if cand_len == 0:
        return 0.0
    log_p = sum(math.log((m + 1.0) / (t + 1.0))
                for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def _lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(references, candidates):
    """Mean LCS F-score."""
    if len(references) != len(candidates):
        raise ValueError("reference/candidate count mismatch")
    beta2 = ROUGE_BETA ** 2
    scores = []
    for ref, cand in zip(references, candidates):
        r, c = tokenize(ref), tokenize(cand)
        lcs = _lcs_length(r, c)
        if lcs == 0 or not r or not c:
            scores.append(0.0)
            continue
        p = lcs / len(c)
        rec = lcs / len(r)
        scores.append((1 + beta2) * p * rec / (rec + beta2 * p))
    return sum(scores) / len(scores) if scores else 0.0


def cider(references, candidates):
    """Mean TF-IDF cosine over n-gram orders 1..4, scaled by 10."""
    if len(references) != len(candidates):
        raise ValueError("reference/candidate count mismatch")
    if not references:
        return 0.0
    N = len(references)
    ref_tokens = [tokenize(r) for r in references]
    cand_tokens = [tokenize(c) for c in candidates]
    df = [Counter() for _ in range(4)]
    for toks in ref_tokens:
        for n in range(1, 5):
            for g in set(_ngrams(toks, n)):
                df[n - 1][g] += 1
    log_n = math.log(N)

    def tfidf(counts, n):
        total = sum(counts.values())
        return {g: (v / total) * (log_n - math.log(max(1.0, df[n - 1][g])))
                for g, v in counts.items()}

    scores = []
    for r, c in zip(ref_tokens, cand_tokens):
        sims = 0.0
        for n in range(1, 5):
            cv = tfidf(_ngrams(c, n), n) if len(c) >= n else {}
            rv = tfidf(_ngrams(r, n), n) if len(r) >= n else {}
            nc = math.sqrt(sum(v * v for v in cv.values()))
            nr = math.sqrt(sum(v * v for v in rv.values()))
            if nc > 0 and nr > 0:
                dot = sum(v * rv[g] for g, v in cv.items() if g in rv)
                sims += dot / (nc * nr)
        scores.append(10.0 * sims / 4.0)
    return sum(scores) / len(scores)


def _stem(token):
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            return token[:-len(suffix)]
    return token


def meteor_simplified(references, candidates):
    """Mean recall-weighted harmonic score over stemmed unigram matches."""
    if len(references) != len(candidates):
        raise ValueError("reference/candidate count mismatch")
    scores = []
    for ref, cand in zip(references, candidates):
        r = Counter(_stem(t) for t in tokenize(ref))
        c = Counter(_stem(t) for t in tokenize(cand))
        m = sum(min(v, r[g]) for g, v in c.items())
        nr, nc = sum(r.values()), sum(c.values())
        if m == 0 or nr == 0 or nc == 0:
            scores.append(0.0)
            continue
        p = m / nc
        rec = m / nr
        scores.append(10.0 * p * rec / (rec + 9.0 * p))
    return sum(scores) / len(scores) if scores else 0.0


def evaluate_pairs(references, candidates):
    """All four corpus metrics as one dict."""
    return {
        "bleu4": bleu4(references, candidates),
        "rouge_l": rouge_l(references, candidates),
        "cider": cider(references, candidates),
        "meteor_simplified": meteor_simplified(references, candidates),
    }
