"""Normalized embeddings and exact (full) softmax quantities.

Embeddings are plain float64 numpy arrays; a class matrix is an ``(n, d)``
array whose rows are unit-norm.  Gradients are flat parameter vectors and a
"logit gradient table" is an ``(n, P)`` array whose row ``i`` is the gradient
of logit ``o_i`` with respect to all ``P`` parameters.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


class DegenerateEmbeddingError(ValueError):
    pass


def normalize(v):
    """Return ``v / ||v||`` as float64.

    Raises
    ------
    DegenerateEmbeddingError
        If ``v`` has zero norm or non-finite entries.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("embedding must be a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise DegenerateEmbeddingError("degenerate embedding: non-finite entries")
    scale = np.max(np.abs(v))
    if scale == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero vector")
    # rescale first so tiny entries do not square into subnormals
    v = v / scale
    return v / np.linalg.norm(v)


def normalize_rows(m):
    m = np.asarray(m, dtype=np.float64)
    scale = np.max(np.abs(m), axis=-1, keepdims=True)
    if np.any(scale == 0.0) or not np.all(np.isfinite(m)):
        raise DegenerateEmbeddingError("degenerate embedding: zero or non-finite row")
    m = m / scale
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def check_class_matrix(classes, atol=1e-9):
    """Validate an ``(n, d)`` class matrix with unit rows and n >= 2."""
    classes = np.asarray(classes, dtype=np.float64)
    if classes.ndim != 2 or classes.shape[0] < 2 or classes.shape[1] < 1:
        raise ValueError(f"class matrix must be (n >= 2, d >= 1), got {classes.shape}")
    if not np.all(np.isfinite(classes)):
        raise ValueError("class matrix has non-finite entries")
    norms = np.linalg.norm(classes, axis=1)
    if np.max(np.abs(norms - 1.0)) > atol:
        raise ValueError("class embeddings must be unit-norm")
    return classes


def random_unit_vectors(rng, count, d):
    return normalize_rows(rng.standard_normal((count, d)))


def exp_kernel_gaussian_form(h, c, tau):
    """``e^tau * exp(-tau ||h - c||^2 / 2)``, equal to ``exp(tau h.c)`` for unit h, c."""
    diff = np.asarray(h) - np.asarray(c)
    return np.exp(tau) * np.exp(-0.5 * tau * np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class SoftmaxState:
    """Exact softmax over all ``n`` classes for one input.

    ``partition`` is ``sum(exp(logits))`` in absolute scale; ``log_partition``
    is kept alongside because it is what losses need.
    """

    tau: float
    logits: np.ndarray
    log_partition: float
    probs: np.ndarray
    target: int

    @property
    def partition(self):
        return float(np.exp(self.log_partition))

    @property
    def n(self):
        return self.logits.shape[0]

    @property
    def negatives(self):
        return np.flatnonzero(np.arange(self.n) != self.target)

    @classmethod
    def from_logits(cls, logits, target, tau=1.0):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 1 or logits.size < 2:
            raise ValueError("need at least two logits")
        if not 0 <= target < logits.size:
            raise IndexError(f"target {target} out of range for {logits.size} classes")
        log_z = float(logsumexp(logits))
        probs = np.exp(logits - log_z)
        probs /= probs.sum()
        return cls(float(tau), logits, log_z, probs, int(target))


def compute_softmax_state(h, classes, tau, target):
    """Softmax state for input embedding ``h`` with logits ``tau * classes @ h``."""
    h = np.asarray(h, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.float64)
    if h.shape != (classes.shape[1],):
        raise ValueError(f"embedding dim {h.shape} does not match classes {classes.shape}")
    return SoftmaxState.from_logits(tau * (classes @ h), target, tau)


def full_loss(state):
    return -state.logits[state.target] + state.log_partition


def full_gradient(state, logit_grads):
    """``-grad o_t + sum_i p_i grad o_i`` for an ``(n, P)`` logit gradient table."""
    logit_grads = np.asarray(logit_grads, dtype=np.float64)
    if logit_grads.ndim != 2 or logit_grads.shape[0] != state.n:
        raise ValueError(
            f"logit gradient table must have shape (n={state.n}, P), got {logit_grads.shape}"
        )
    return state.probs @ logit_grads - logit_grads[state.target]


# ---------------------------------------------------------------------------
# Linear embedding model: h = normalize(x @ W), o_i = tau * h . c_i
# Flat parameter layout: [W.ravel(), C.ravel()].
# ---------------------------------------------------------------------------


def pack_params(input_map, classes):
    return np.concatenate([np.ravel(input_map), np.ravel(classes)])


def unpack_params(theta, v, d, n):
    theta = np.asarray(theta, dtype=np.float64)
    return theta[: v * d].reshape(v, d), theta[v * d :].reshape(n, d)


def linear_logits(x, input_map, classes, tau):
    """Logits of the linear model for a dense input ``x``; class rows used as given."""
    z = np.asarray(x, dtype=np.float64) @ input_map
    return tau * (classes @ normalize(z))


def linear_logit_grads(x, input_map, classes, tau):
    """Gradient table ``(n, v*d + n*d)`` of every logit w.r.t. ``[W, C]``.

    Dense and O(n * (v + n) * d); meant for small analysis instances only.
    """
    x = np.asarray(x, dtype=np.float64)
    v, d = input_map.shape
    n = classes.shape[0]
    z = x @ input_map
    norm = np.linalg.norm(z)
    h = z / norm
    # d o_i / d z = tau (I - h h^T) c_i / ||z||
    dz = tau * (classes - np.outer(classes @ h, h)) / norm
    grads = np.zeros((n, v * d + n * d))
    grads[:, : v * d] = (x[None, :, None] * dz[:, None, :]).reshape(n, v * d)
    for i in range(n):
        start = v * d + i * d
        grads[i, start : start + d] = tau * h
    return grads
