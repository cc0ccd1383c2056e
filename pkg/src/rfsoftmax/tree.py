"""Array-backed binary sum tree over class feature vectors.

Node ``k`` stores ``sum_{j in S_k} phi(c_j)`` for the classes ``S_k`` below it.
Given a query ``phi(h)``, the mass of a node is ``phi(h) . sum_{j in S_k} phi(c_j)``,
clamped below at ``eps * |S_k|`` so that kernel estimates which come out
negative (RFF cosine sums can) still give a valid, strictly positive law.
Sampling walks root to leaf choosing the left child with probability
``mass(left) / (mass(left) + mass(right))``; one draw costs O(F log n).

The law of a draw is exactly the product of those descent ratios, which is
what :meth:`SamplerTree.exact_probability` returns.  When no clamp is active
this equals ``K(h, c_i) / sum_j K(h, c_j)``.
"""

import numpy as np

from rfsoftmax import _kernels


class DegenerateDistributionError(RuntimeError):
    pass


DEFAULT_EPS = 1e-6
DEFAULT_REFRESH_EVERY = 100_000


class SamplerTree:
    """Sum tree over ``n`` classes for kernel-proportional sampling.

    Parameters
    ----------
    classes : (n, d) array
        Class embeddings (normalized for RFF / quadratic use).
    feature_map : FeatureMap
        Map ``phi`` with ``transform`` and ``dim``.
    eps : float
        Per-class mass floor.
    refresh_every : int or None
        Rebuild all internal sums from the leaves after this many updates to
        cancel accumulated round-off.  ``None`` disables it.
    """

    def __init__(self, classes, feature_map, eps=DEFAULT_EPS, refresh_every=DEFAULT_REFRESH_EVERY,
                 chunk_size=65536):
        classes = np.asarray(classes, dtype=np.float64)
        if classes.ndim != 2 or classes.shape[0] < 2:
            raise ValueError("need at least two classes")
        if eps < 0:
            raise ValueError("eps must be non-negative")
        self.feature_map = feature_map
        self.num_classes = n = classes.shape[0]
        self.feature_dim = feature_map.dim
        self.eps = float(eps)
        self.refresh_every = refresh_every
        self.depth = max(1, int(np.ceil(np.log2(n))))
        self.capacity = 1 << self.depth
        self.node_sums = np.zeros((2 * self.capacity, self.feature_dim))
        for start in range(0, n, chunk_size):
            stop = min(n, start + chunk_size)
            self.node_sums[self.capacity + start : self.capacity + stop] = feature_map.transform(
                classes[start:stop]
            )
        self.counts = np.zeros(2 * self.capacity, dtype=np.int64)
        self.counts[self.capacity : self.capacity + n] = 1
        self._aggregate()
        self.updates_since_refresh = 0

    def _aggregate(self):
        lo = self.capacity
        while lo > 1:
            hi = 2 * lo
            parents = slice(lo // 2, lo)
            np.add(self.node_sums[lo:hi:2], self.node_sums[lo + 1 : hi : 2], out=self.node_sums[parents])
            np.add(self.counts[lo:hi:2], self.counts[lo + 1 : hi : 2], out=self.counts[parents])
            lo //= 2

    @property
    def leaf_features(self):
        return self.node_sums[self.capacity : self.capacity + self.num_classes]

    @property
    def root_sum(self):
        return self.node_sums[1]

    def query_features(self, h):
        return np.ascontiguousarray(self.feature_map.transform(h), dtype=np.float64)

    def _check_query(self, query):
        query = np.ascontiguousarray(query, dtype=np.float64)
        if query.shape != (self.feature_dim,):
            raise ValueError(f"query features must have shape ({self.feature_dim},), got {query.shape}")
        return query

    def _check_index(self, i):
        if not 0 <= i < self.num_classes:
            raise IndexError(f"class index {i} out of range [0, {self.num_classes})")

    def sample(self, query, rng, size=1):
        """Draw ``size`` class indices i.i.d. from the tree law for ``query`` features."""
        return self.sample_with_probabilities(query, rng, size)[0]

    def sample_with_probabilities(self, query, rng, size=1):
        """Like :meth:`sample`, also returning the probability of each drawn class."""
        query = self._check_query(query)
        uniforms = rng.random((size, self.depth))
        leaves, probs = _kernels.sample_leaves(self.node_sums, self.counts, query, self.eps, uniforms)
        if np.any(leaves < 0):
            raise DegenerateDistributionError("degenerate sampling distribution: zero total mass")
        return leaves, probs

    def sample_class(self, query, rng):
        return int(self.sample(query, rng, 1)[0])

    def exact_probability(self, query, i):
        """Probability that :meth:`sample` returns ``i``: the product of descent ratios."""
        query = self._check_query(query)
        self._check_index(i)
        if self.root_mass(query) <= 0.0:
            raise DegenerateDistributionError("degenerate sampling distribution: zero total mass")
        return float(_kernels.path_probability(self.node_sums, self.counts, query, self.eps, i, self.depth))

    def path_probabilities(self, query, leaves):
        """Vector form of :meth:`exact_probability` for many class indices."""
        query = self._check_query(query)
        leaves = np.ascontiguousarray(leaves, dtype=np.int64)
        if leaves.size and (leaves.min() < 0 or leaves.max() >= self.num_classes):
            raise IndexError("class index out of range")
        if self.root_mass(query) <= 0.0:
            raise DegenerateDistributionError("degenerate sampling distribution: zero total mass")
        return _kernels.path_probabilities(self.node_sums, self.counts, query, self.eps, leaves, self.depth)

    def root_mass(self, query):
        raw = float(self.node_sums[1] @ query)
        return max(raw, self.eps * self.num_classes)

    def node_masses(self, query):
        query = self._check_query(query)
        raw = self.node_sums @ query
        masses = np.where(self.counts > 0, np.maximum(raw, self.eps * self.counts), 0.0)
        masses[0] = 0.0
        return masses

    def all_probabilities(self, query):
        """Law over all ``n`` classes in O(n F), computed level by level."""
        masses = self.node_masses(query)
        if masses[1] <= 0.0:
            raise DegenerateDistributionError("degenerate sampling distribution: zero total mass")
        prob = np.zeros(2 * self.capacity)
        prob[1] = 1.0
        lo = 1
        while lo < self.capacity:
            parents = np.arange(lo, 2 * lo)
            left, right = 2 * parents, 2 * parents + 1
            total = masses[left] + masses[right]
            safe = np.where(total > 0, total, 1.0)
            prob[left] = np.where(total > 0, prob[parents] * (masses[left] / safe), 0.0)
            prob[right] = np.where(total > 0, prob[parents] * (masses[right] / safe), 0.0)
            lo *= 2
        return prob[self.capacity : self.capacity + self.num_classes]

    def update_class(self, i, embedding):
        """Replace class ``i``'s features and fix the ``log n`` ancestor sums."""
        self._check_index(i)
        new = self.feature_map.transform(np.asarray(embedding, dtype=np.float64))
        node = self.capacity + i
        delta = np.ascontiguousarray(new - self.node_sums[node])
        _kernels.update_path(self.node_sums, node, delta)
        # pin the leaf to the exact new value; the delta round trip can be off by an ulp
        self.node_sums[node] = new
        self.updates_since_refresh += 1
        if self.refresh_every is not None and self.updates_since_refresh >= self.refresh_every:
            self.refresh()

    def update_classes(self, indices, embeddings):
        """Batch form of :meth:`update_class`; ``indices`` must be distinct."""
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        if indices.size == 0:
            return
        if indices.min() < 0 or indices.max() >= self.num_classes:
            raise IndexError("class index out of range")
        if np.unique(indices).size != indices.size:
            raise ValueError("batch updates need distinct class indices")
        new = self.feature_map.transform(np.atleast_2d(np.asarray(embeddings, dtype=np.float64)))
        nodes = self.capacity + indices
        deltas = np.ascontiguousarray(new - self.node_sums[nodes])
        _kernels.update_paths(self.node_sums, nodes, deltas)
        self.node_sums[nodes] = new
        self.updates_since_refresh += indices.size
        if self.refresh_every is not None and self.updates_since_refresh >= self.refresh_every:
            self.refresh()

    def refresh(self):
        """Recompute every internal node from the current leaves."""
        self.node_sums[1 : self.capacity] = 0.0
        self._aggregate()
        self.updates_since_refresh = 0

    def max_internal_gap(self):
        """Largest deviation of a stored internal sum from a fresh aggregation of the leaves."""
        fresh = self.node_sums.copy()
        fresh[1 : self.capacity] = 0.0
        lo = self.capacity
        while lo > 1:
            hi = 2 * lo
            fresh[lo // 2 : lo] = fresh[lo:hi:2] + fresh[lo + 1 : hi : 2]
            lo //= 2
        return float(np.max(np.abs(fresh[1 : self.capacity] - self.node_sums[1 : self.capacity])))


def build_tree(classes, feature_map, **kwargs):
    return SamplerTree(classes, feature_map, **kwargs)


def sample_class(tree, query, rng):
    return tree.sample_class(query, rng)


def update_class(tree, i, embedding):
    tree.update_class(i, embedding)


def exact_probability(tree, query, i):
    return tree.exact_probability(query, i)
