"""Salience-based token routing.

Scores each question token by a blend of its embedding magnitude and a
position prior that favors the middle of the sequence, then keeps the top-K
tokens and drops the rest. Pruned tokens are removed outright — downstream
attention never sees them — so the fused sequence the decoder attends over
gets shorter, not masked.

Selection is hard and non-differentiable by design; gradients flow through
the surviving tokens' embeddings only.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RouterConfig:
    """Scoring and budget knobs.

    max_tokens: hard keep budget K; a sequence never keeps more than this.
    magnitude_weight / position_weight: blend of the two salience terms.
    center_boost: prior value inside the middle half of the sequence
        (positions L/4..3L/4 inclusive, 1-based with real-valued bounds);
        elsewhere the prior is 1.0.
    gain: scalar applied to the blended score before normalization.
    """

    max_tokens: int = 64
    magnitude_weight: float = 0.5
    position_weight: float = 0.5
    center_boost: float = 1.2
    gain: float = 1.0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass
class RoutedSequence:
    """Routing outcome for one sequence.

    kept_positions: original 0-based indices of surviving tokens, strictly
        increasing. scores: normalized salience for every non-pad position
        (length = original non-pad count).
    """

    kept_positions: np.ndarray
    scores: np.ndarray
    original_length: int

    @property
    def kept_count(self):
        return len(self.kept_positions)


def position_prior(length, center_boost=1.2):
    """Middle-half boost: 1-based rank l gets ``center_boost`` iff
    L/4 <= l <= 3L/4 (real-valued inclusive bounds), else 1.0."""
    ranks = np.arange(1, length + 1, dtype=np.float64)
    lo, hi = length / 4.0, 3.0 * length / 4.0
    return np.where((ranks >= lo) & (ranks <= hi), center_boost, 1.0)


def _normalize(raw):
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


class TokenRouter:
    """Stateless scorer/selector over per-token embeddings."""

    def __init__(self, config=None):
        self.config = config or RouterConfig()

    def score(self, embeddings):
        """Normalized salience for one sequence's non-pad embeddings (L, d)."""
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError(f"score expects (length, dim), got {emb.shape}")
        L = emb.shape[0]
        if L == 0:
            return np.zeros(0)
        cfg = self.config
        mag = np.linalg.norm(emb, axis=1)
        raw = (cfg.magnitude_weight * mag
               + cfg.position_weight * position_prior(L, cfg.center_boost))
        raw = raw * cfg.gain
        return _normalize(raw)

    def route(self, embeddings, valid_mask=None):
        """Select the highest-scoring tokens of one sequence.

        Args:
            embeddings: (L, d) token embeddings (pad rows allowed).
            valid_mask: optional (L,) truthy mask; pad rows are excluded from
                scoring and can never be kept.
        Returns:
            RoutedSequence. Keeps min(K, #valid) tokens; ties broken toward
            the earlier position; kept positions reported in original order.
        """
        emb = np.asarray(embeddings)
        L = emb.shape[0]
        if valid_mask is None:
            valid_idx = np.arange(L)
        else:
            valid_idx = np.flatnonzero(np.asarray(valid_mask))
        nonpad = len(valid_idx)
        scores = self.score(emb[valid_idx])
        k = min(self.config.max_tokens, nonpad)
        if k == 0:
            return RoutedSequence(np.zeros(0, dtype=np.int64), scores, nonpad)
        # stable sort on negated scores keeps earlier positions first on ties
        order = np.argsort(-scores, kind="stable")[:k]
        kept = np.sort(valid_idx[order])
        return RoutedSequence(kept.astype(np.int64), scores, nonpad)

    def route_batch(self, embeddings, valid_mask):
        """Route each row of (B, L, d); returns list of RoutedSequence."""
        return [self.route(embeddings[i], valid_mask[i])
                for i in range(embeddings.shape[0])]


def compact_batch(token_ids, routed, pad_id=0):
    """Gather surviving tokens into a right-padded batch.

    Args:
        token_ids: (B, L) int array.
        routed: list of RoutedSequence from ``route_batch``.
    Returns:
        (kept_ids (B, K'), kept_mask (B, K')) where K' is the batch max kept
        count (at least 1 so downstream shapes stay rectangular).
    """
    token_ids = np.asarray(token_ids)
    width = max(1, max((r.kept_count for r in routed), default=1))
    out = np.full((token_ids.shape[0], width), pad_id, dtype=token_ids.dtype)
    mask = np.zeros((token_ids.shape[0], width), dtype=bool)
    for i, r in enumerate(routed):
        k = r.kept_count
        out[i, :k] = token_ids[i, r.kept_positions]
        mask[i, :k] = True
    return out, mask
