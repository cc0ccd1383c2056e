"""Negative-class samplers sharing one interface.

Each sampler draws ``m`` i.i.d. negatives (with replacement) from a law ``q``
over ``N_t = [n] minus {t}`` and reports ``q`` at every draw.  The reported
values are the true law of the generator, which is what the logit correction
in :mod:`rfsoftmax.sampled` relies on.
"""

from dataclasses import dataclass

import numpy as np

from rfsoftmax.features import QuadraticMap, build_rff
from rfsoftmax.tree import DEFAULT_EPS, SamplerTree

MAX_REJECTION_ROUNDS = 10_000
# kernel samplers switch from target rejection to an O(nF) enumeration above this q_t
ENUMERATE_ABOVE = 0.9

SCHEMES = ("uniform", "loguniform", "exp", "quadratic", "rff")


class RejectionLimitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampledBatch:
    target: int
    samples: np.ndarray
    q_values: np.ndarray
    scheme: str

    @property
    def m(self):
        return self.samples.shape[0]


class NegativeSampler:
    """Base class.  Subclasses implement :meth:`class_probabilities` and :meth:`_draw`."""

    name = "base"

    def __init__(self, num_classes):
        if num_classes < 2:
            raise ValueError("need at least one negative class (n >= 2)")
        self.num_classes = int(num_classes)

    def class_probabilities(self, h):
        """Law over all ``n`` classes before the target is excluded."""
        raise NotImplementedError

    def negative_probabilities(self, h, t):
        """Law over ``N_t`` as a length-``n`` vector with a zero at ``t``."""
        self._check_target(t)
        q = np.array(self.class_probabilities(h), dtype=np.float64)
        q[t] = 0.0
        total = q.sum()
        if not total > 0:
            raise RejectionLimitError("all sampling mass sits on the target class")
        return q / total

    def _check_target(self, t):
        if not 0 <= t < self.num_classes:
            raise IndexError(f"target {t} out of range [0, {self.num_classes})")

    def _draw(self, h, size, rng):
        """Draw ``size`` indices from :meth:`class_probabilities` (target not excluded)."""
        raise NotImplementedError

    def _q_of(self, h, t, samples):
        return self.negative_probabilities(h, t)[samples]

    def sample(self, h, t, m, rng):
        """Draw ``m`` negatives for input ``h`` and target ``t`` by rejecting ``t``."""
        self._check_target(t)
        if m < 1:
            raise ValueError("m must be >= 1")
        out = self._draw(h, m, rng)
        rounds = 0
        bad = np.flatnonzero(out == t)
        while bad.size:
            rounds += 1
            if rounds > MAX_REJECTION_ROUNDS:
                raise RejectionLimitError(
                    f"target rejection exceeded {MAX_REJECTION_ROUNDS} rounds (q_t close to 1)"
                )
            out[bad] = self._draw(h, bad.size, rng)
            bad = bad[out[bad] == t]
        return SampledBatch(int(t), out, self._q_of(h, t, out), self.name)

    def update_class(self, i, embedding):
        """Hook for schemes that cache class-dependent state."""

    def update_classes(self, indices, embeddings):
        for i, c in zip(indices, embeddings):
            self.update_class(int(i), c)


class UniformSampler(NegativeSampler):
    name = "uniform"

    def class_probabilities(self, h=None):
        return np.full(self.num_classes, 1.0 / self.num_classes)

    def sample(self, h, t, m, rng):
        # draw directly from N_t: no rejection needed
        self._check_target(t)
        if m < 1:
            raise ValueError("m must be >= 1")
        raw = rng.integers(0, self.num_classes - 1, size=m)
        samples = raw + (raw >= t)
        return SampledBatch(int(t), samples, np.full(m, 1.0 / (self.num_classes - 1)), self.name)


class LogUniformSampler(NegativeSampler):
    """Zipfian prior over class index as rank: ``P(r) = log((r + 2) / (r + 1)) / log(n + 1)``."""

    name = "loguniform"

    def __init__(self, num_classes):
        super().__init__(num_classes)
        r = np.arange(self.num_classes)
        self._probs = np.log1p(1.0 / (r + 1.0)) / np.log(self.num_classes + 1.0)

    def class_probabilities(self, h=None):
        return self._probs

    def _draw(self, h, size, rng):
        # inverse CDF: F(r) = log(r + 2) / log(n + 1)
        u = rng.random(size)
        r = np.floor(np.exp(u * np.log(self.num_classes + 1.0))).astype(np.int64) - 1
        return np.clip(r, 0, self.num_classes - 1)


class ExpSampler(NegativeSampler):
    """Samples from the exact softmax ``q_i ~ exp(tau h.c_i)``; O(n d) per input.

    ``classes`` is held by reference so in-place training updates are seen.
    """

    name = "exp"

    def __init__(self, classes, tau):
        super().__init__(np.shape(classes)[0])
        self.classes = classes
        self.tau = float(tau)

    def class_probabilities(self, h):
        o = self.tau * (self.classes @ np.asarray(h, dtype=np.float64))
        e = np.exp(o - o.max())
        return e / e.sum()

    def sample(self, h, t, m, rng):
        self._check_target(t)
        if m < 1:
            raise ValueError("m must be >= 1")
        q = self.negative_probabilities(h, t)
        samples = draw_from_law(q, m, rng)
        return SampledBatch(int(t), samples, q[samples], self.name)


class KernelSampler(NegativeSampler):
    """Kernel-based sampling through a :class:`SamplerTree`; O(F log n) per draw."""

    def __init__(self, classes, feature_map, name="kernel", eps=DEFAULT_EPS, **tree_kwargs):
        super().__init__(np.shape(classes)[0])
        self.name = name
        self.feature_map = feature_map
        self.tree = SamplerTree(classes, feature_map, eps=eps, **tree_kwargs)
        self._cache_key = None
        self._cache_query = None

    def query_features(self, h):
        h = np.asarray(h, dtype=np.float64)
        key = h.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache_query = self.tree.query_features(h)
        return self._cache_query

    def class_probabilities(self, h):
        return self.tree.all_probabilities(self.query_features(h))

    def _draw(self, h, size, rng):
        return self.tree.sample(self.query_features(h), rng, size)

    def sample(self, h, t, m, rng):
        # the descent yields each draw's probability, so q costs one extra path for t
        self._check_target(t)
        if m < 1:
            raise ValueError("m must be >= 1")
        query = self.query_features(h)
        q_t = self.tree.exact_probability(query, t)
        if q_t > ENUMERATE_ABOVE:
            # rejection would mostly redraw the target; enumerate the law once instead
            q = self.negative_probabilities(h, t)
            samples = draw_from_law(q, m, rng)
            return SampledBatch(int(t), samples, q[samples], self.name)
        out, probs = self.tree.sample_with_probabilities(query, rng, m)
        rounds = 0
        bad = np.flatnonzero(out == t)
        while bad.size:
            rounds += 1
            if rounds > MAX_REJECTION_ROUNDS:
                raise RejectionLimitError(
                    f"target rejection exceeded {MAX_REJECTION_ROUNDS} rounds (q_t close to 1)"
                )
            out[bad], probs[bad] = self.tree.sample_with_probabilities(query, rng, bad.size)
            bad = bad[out[bad] == t]
        return SampledBatch(int(t), out, probs / (1.0 - q_t), self.name)

    def update_class(self, i, embedding):
        self.tree.update_class(i, embedding)
        self._cache_key = None

    def update_classes(self, indices, embeddings):
        self.tree.update_classes(indices, embeddings)
        self._cache_key = None


def make_rff_sampler(classes, num_frequencies, nu, seed=None, eps=DEFAULT_EPS, precision="double",
                     **tree_kwargs):
    fmap = build_rff(np.shape(classes)[1], num_frequencies, nu, seed, precision=precision)
    return KernelSampler(classes, fmap, name="rff", eps=eps, **tree_kwargs)


def make_quadratic_sampler(classes, alpha=100.0, eps=DEFAULT_EPS, **tree_kwargs):
    fmap = QuadraticMap(np.shape(classes)[1], alpha)
    return KernelSampler(classes, fmap, name="quadratic", eps=eps, **tree_kwargs)


def make_sampler(scheme, classes, tau=None, nu=None, num_frequencies=None, alpha=100.0, seed=None,
                 rff_precision="double", **tree_kwargs):
    """Construct a sampler by scheme name (see :data:`SCHEMES`)."""
    n = np.shape(classes)[0]
    if scheme == "uniform":
        return UniformSampler(n)
    if scheme == "loguniform":
        return LogUniformSampler(n)
    if scheme == "exp":
        if tau is None:
            raise ValueError("exp scheme needs tau")
        return ExpSampler(classes, tau)
    if scheme == "quadratic":
        return make_quadratic_sampler(classes, alpha, **tree_kwargs)
    if scheme == "rff":
        if nu is None or num_frequencies is None:
            raise ValueError("rff scheme needs nu and num_frequencies")
        return make_rff_sampler(classes, num_frequencies, nu, seed, precision=rff_precision, **tree_kwargs)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def sample_negatives(sampler, h, t, m, rng):
    return sampler.sample(h, t, m, rng)


def draw_from_law(q, size, rng):
    """I.i.d. draws of shape ``size`` from a probability vector ``q``."""
    cdf = np.cumsum(q)
    idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
    idx = np.minimum(idx, len(q) - 1)
    # never return a zero-probability index (guards edge rounding)
    bad = q[idx] <= 0
    if np.any(bad):
        support = np.flatnonzero(q > 0)
        pos = np.clip(np.searchsorted(support, idx[bad]), 0, support.size - 1)
        idx[bad] = support[pos]
    return idx
