"""Prioritized replay over training records.

Each record carries a priority blended from three signals of the most recent
training step that touched it: normalized loss (0.5), answer-token
uncertainty (0.3), and embedding diversity within its batch (0.2). Sampling
is proportional to priority^alpha through a binary sum tree; draws return
importance weights that anneal toward full bias correction as training
progresses.
"""

import numpy as np

PRIORITY_WEIGHTS = (0.5, 0.3, 0.2)   # loss, uncertainty, diversity
DEFAULT_ALPHA = 0.6
DEFAULT_BETA0 = 0.4
DEFAULT_BETA_RATE = 0.001
_DEGENERATE_EPS = 1e-12


# -- priority signals --------------------------------------------------------

def normalized_losses(per_seq_loss):
    """Per-batch min-max of per-sequence mean loss; flat batches -> 0.5."""
    loss = np.asarray(per_seq_loss, dtype=np.float64)
    lo, hi = loss.min(), loss.max()
    if hi - lo < _DEGENERATE_EPS:
        return np.full(loss.shape, 0.5)
    return (loss - lo) / (hi - lo)


def uncertainties(max_prob_lists):
    """1 - mean top-token probability per sequence (non-pad positions only)."""
    out = np.empty(len(max_prob_lists), dtype=np.float64)
    for i, probs in enumerate(max_prob_lists):
        p = np.asarray(probs, dtype=np.float64)
        out[i] = 1.0 - (p.mean() if p.size else 1.0)
    return out


def diversities(embeddings):
    """1 - mean cosine similarity to the other batch members, in [0, 1].

    A batch of one has no peers and counts as maximally diverse (1.0).
    Zero-magnitude embeddings contribute zero similarity.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    n = e.shape[0]
    if n == 1:
        return np.ones(1)
    norms = np.linalg.norm(e, axis=1)
    safe = np.where(norms < _DEGENERATE_EPS, 1.0, norms)
    unit = e / safe[:, None]
    unit[norms < _DEGENERATE_EPS] = 0.0
    cos = unit @ unit.T
    mean_other = (cos.sum(axis=1) - np.diag(cos)) / (n - 1)
    return np.clip(1.0 - mean_other, 0.0, 1.0)


def batch_priorities(per_seq_loss, max_prob_lists, embeddings,
                     weights=PRIORITY_WEIGHTS):
    """Blend the three signals into one priority per batch element."""
    wl, wu, wd = weights
    return (wl * normalized_losses(per_seq_loss)
            + wu * uncertainties(max_prob_lists)
            + wd * diversities(embeddings))


# -- sum tree ----------------------------------------------------------------

class SumTree:
    """Fixed-capacity binary sum tree over nonnegative leaf values.

    Updates recompute each ancestor from its children (no incremental drift);
    prefix-sum descent finds the leaf owning a given cumulative offset.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        size = 1
        while size < capacity:
            size *= 2
        self._leaves = size
        self._nodes = np.zeros(2 * size, dtype=np.float64)

    @property
    def total(self):
        return float(self._nodes[1])

    def get(self, index):
        return float(self._nodes[self._leaves + index])

    def set(self, index, value):
        if value < 0:
            raise ValueError(f"leaf value must be >= 0, got {value}")
        i = self._leaves + index
        self._nodes[i] = value
        i //= 2
        while i >= 1:
            self._nodes[i] = self._nodes[2 * i] + self._nodes[2 * i + 1]
            i //= 2

    def find(self, offset):
        """Leaf index whose cumulative range contains ``offset``."""
        i = 1
        while i < self._leaves:
            left = self._nodes[2 * i]
            if offset < left:
                i = 2 * i
            else:
                offset -= left
                i = 2 * i + 1
        return i - self._leaves

    def max_relative_sum_error(self):
        """Largest relative mismatch between any node and its children."""
        worst = 0.0
        for i in range(1, self._leaves):
            expect = self._nodes[2 * i] + self._nodes[2 * i + 1]
            denom = max(abs(self._nodes[i]), abs(expect), 1.0)
            worst = max(worst, abs(self._nodes[i] - expect) / denom)
        return worst


# -- buffer -------------------------------------------------------------------

class PriorityBuffer:
    """Prioritized pool of training records.

    Args:
        capacity: maximum record count; adding beyond it evicts the record
            with the lowest priority.
        alpha: priority exponent for sampling (P ~ priority^alpha).
        beta0 / beta_rate: importance-weight anneal start and per-step slope;
            beta is computed from the anneal count, so it hits 1.0 exactly
            after ceil((1 - beta0)/beta_rate) steps and stays there.
        seed: RNG seed for sampling.
        normalize_weights: divide each drawn batch's weights by its max
            (training default); raw weights expose the unbiased estimator.
        n_from_fill: use the current record count as N in the weight formula
            (default); otherwise use capacity.
    """

    def __init__(self, capacity, alpha=DEFAULT_ALPHA, beta0=DEFAULT_BETA0,
                 beta_rate=DEFAULT_BETA_RATE, seed=0, normalize_weights=True,
                 n_from_fill=True):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        self.capacity = capacity
        self.alpha = alpha
        self.beta0 = beta0
        self.beta_rate = beta_rate
        self.normalize_weights = normalize_weights
        self.n_from_fill = n_from_fill
        self._tree = SumTree(capacity)
        self._items = []
        self._priorities = []
        self._anneal_count = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    @property
    def beta(self):
        return min(1.0, self.beta0 + self.beta_rate * self._anneal_count)

    def anneal_beta(self):
        self._anneal_count += 1
        return self.beta

    # -- mutation ----------------------------------------------------------
    def add(self, item, priority=None):
        """Insert a record; defaults to the current max priority (1.0 when
        empty) so new records are revisited promptly. Returns its slot."""
        if priority is None:
            priority = max(self._priorities) if self._priorities else 1.0
        if len(self._items) < self.capacity:
            slot = len(self._items)
            self._items.append(item)
            self._priorities.append(float(priority))
        else:
            slot = int(np.argmin(self._priorities))
            self._items[slot] = item
            self._priorities[slot] = float(priority)
        self._tree.set(slot, float(priority) ** self.alpha)
        return slot

    def update(self, slots, priorities):
        """Overwrite priorities for existing records (latest stats win)."""
        for slot, pr in zip(slots, priorities):
            if not 0 <= slot < len(self._items):
                raise IndexError(f"slot {slot} outside filled range 0..{len(self._items) - 1}")
            self._priorities[slot] = float(pr)
            self._tree.set(slot, float(pr) ** self.alpha)

    # -- sampling ------------------------------------------------------------
    def probabilities(self):
        """Exact sampling distribution over filled slots."""
        n = len(self._items)
        scaled = np.array([self._tree.get(i) for i in range(n)])
        total = scaled.sum()
        if total <= 0:
            raise ValueError("all priorities are zero; nothing to sample")
        return scaled / total

    def sample(self, k):
        """Draw k slots (with replacement) by priority.

        Returns:
            (slots, items, probs, weights): weights follow
            ((1/N) * (1/P))^beta, max-normalized per batch unless the buffer
            was built with normalize_weights=False.
        """
        n = len(self._items)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self._tree.total
        if total <= 0:
            raise ValueError("all priorities are zero; nothing to sample")
        slots = np.empty(k, dtype=np.int64)
        for j in range(k):
            u = self._rng.random() * total
            slot = self._tree.find(u)
            if slot >= n or self._tree.get(slot) == 0.0:
                # float-edge landing on an empty leaf: take the last filled one
                slot = max(i for i in range(n) if self._tree.get(i) > 0)
            slots[j] = slot
        probs = np.array([self._tree.get(s) / total for s in slots])
        N = n if self.n_from_fill else self.capacity
        weights = np.power((1.0 / N) * (1.0 / probs), self.beta)
        if self.normalize_weights:
            weights = weights / weights.max()
        items = [self._items[s] for s in slots]
        return slots, items, probs, weights

    # -- introspection -------------------------------------------------------
    def priorities(self):
        return np.array(self._priorities, dtype=np.float64)

    def items(self):
        return list(self._items)

    def max_relative_sum_error(self):
        return self._tree.max_relative_sum_error()

    # -- persistence ---------------------------------------------------------
    def state_dict(self):
        return {
            "capacity": self.capacity,
            "alpha": self.alpha,
            "beta0": self.beta0,
            "beta_rate": self.beta_rate,
            "normalize_weights": self.normalize_weights,
            "n_from_fill": self.n_from_fill,
            "items": list(self._items),
            "priorities": list(map(float, self._priorities)),
            "anneal_count": self._anneal_count,
            "rng_state": self._rng.bit_generator.state,
        }

    @classmethod
    def from_state_dict(cls, state):
        buf = cls(state["capacity"], alpha=state["alpha"], beta0=state["beta0"],
                  beta_rate=state["beta_rate"],
                  normalize_weights=state["normalize_weights"],
                  n_from_fill=state["n_from_fill"])
        for item, pr in zip(state["items"], state["priorities"]):
            buf._items.append(item)
            buf._priorities.append(pr)
            buf._tree.set(len(buf._items) - 1, pr ** buf.alpha)
        buf._anneal_count = state["anneal_count"]
        buf._rng.bit_generator.state = state["rng_state"]
        return buf
