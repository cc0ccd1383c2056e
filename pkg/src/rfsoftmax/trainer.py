"""Desk-scale training of a sparse-input linear embedding classifier.

Model: ``h = normalize(x W)`` with ``W`` of shape ``(v, d)``, class embeddings
``C`` with unit rows, logits ``o = tau C h``.  Each SGD step uses the
sampled-softmax gradient estimate (or the exact gradient for ``scheme="full"``),
touches only the target and sampled classes plus the input-map rows of the
example's active features, then re-projects updated class rows onto the unit
sphere.  Kernel samplers are told about every class row that moved.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from rfsoftmax.embedding import normalize_rows
from rfsoftmax.sampled import adjust_sampled_logits, estimator_weights, sampled_loss
from rfsoftmax.samplers import KernelSampler, make_sampler
from rfsoftmax.tree import SamplerTree

logger = logging.getLogger(__name__)

DEFAULT_SOFTMAX_TEMP = 0.3
DEFAULT_RFF_TEMP = 0.5
DEFAULT_M = 100


def tau_from_temperature(temp):
    """Inverse temperature for a softmax temperature defined as ``1 / sqrt(tau)``."""
    return 1.0 / temp**2


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Model:
    input_map: np.ndarray
    class_embeddings: np.ndarray
    tau: float

    @classmethod
    def init(cls, num_features, num_classes, d, tau, seed=None):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((num_features, d)) / math.sqrt(d)
        c = normalize_rows(rng.standard_normal((num_classes, d)))
        return cls(w, c, float(tau))

    @property
    def d(self):
        return self.class_embeddings.shape[1]

    @property
    def num_classes(self):
        return self.class_embeddings.shape[0]

    def embed(self, features):
        """Unit input embeddings for a sparse ``(N, v)`` matrix (zero rows map to zero)."""
        z = np.asarray(features @ self.input_map)
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        return z / np.where(norms > 0, norms, 1.0)

    def logits(self, features):
        return self.tau * self.embed(features) @ self.class_embeddings.T

    def copy(self):
        return Model(self.input_map.copy(), self.class_embeddings.copy(), self.tau)


def full_losses(model, dataset, chunk=4096):
    """Per-example full softmax loss ``-o_t + log Z``."""
    out = np.empty(len(dataset))
    for start in range(0, len(dataset), chunk):
        stop = min(len(dataset), start + chunk)
        o = model.logits(dataset.features[start:stop])
        top = o.max(axis=1)
        log_z = top + np.log(np.exp(o - top[:, None]).sum(axis=1))
        out[start:stop] = log_z - o[np.arange(stop - start), dataset.labels[start:stop]]
    return out


def precision_at_k(model, dataset, k, chunk=4096):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not 1 <= k <= model.num_classes:
        raise ValueError(f"k must be in [1, {model.num_classes}]")
    hits = 0
    for start in range(0, len(dataset), chunk):
        stop = min(len(dataset), start + chunk)
        o = model.logits(dataset.features[start:stop])
        labels = dataset.labels[start:stop]
        if k == model.num_classes:
            hits += stop - start
            continue
        # count classes scoring strictly above the label; ties resolve in the label's favour
        above = (o > o[np.arange(stop - start), labels][:, None]).sum(axis=1)
        hits += int(np.sum(above < k))
    return hits / len(dataset)


@dataclass
class EpochStats:
    epoch: int
    scheme: str
    mean_sampled_loss: float
    probe_full_loss: float
    lr: float
    seconds: float
    audit_max_gap: float = float("nan")
    extras: dict = field(default_factory=dict)


def make_scheme(scheme, model, m=None, nu=None, num_frequencies=None, alpha=100.0, seed=None, **tree_kwargs):
    """Sampler for ``scheme`` bound to ``model``'s class embeddings, or ``None`` for full softmax."""
    if scheme == "full":
        return None
    return make_sampler(
        scheme, model.class_embeddings, tau=model.tau, nu=nu, num_frequencies=num_frequencies,
        alpha=alpha, seed=seed, **tree_kwargs,
    )


def _step_full(model, idx, vals, t, lr):
    w_rows = model.input_map[idx]
    z = vals @ w_rows
    norm = np.linalg.norm(z)
    h = z / norm
    o = model.tau * (model.class_embeddings @ h)
    top = o.max()
    p = np.exp(o - top)
    p /= p.sum()
    loss = float(top + np.log(np.exp(o - top).sum()) - o[t])
    coef = p
    coef[t] -= 1.0
    if lr == 0.0:
        return loss
    g_h = model.tau * (coef @ model.class_embeddings)
    g_z = (g_h - (h @ g_h) * h) / norm
    model.class_embeddings -= lr * model.tau * np.outer(coef, h)
    model.class_embeddings /= np.linalg.norm(model.class_embeddings, axis=1, keepdims=True)
    model.input_map[idx] = w_rows - lr * np.outer(vals, g_z)
    return loss


def _step_sampled(model, sampler, idx, vals, t, m, lr, rng, absolute):
    w_rows = model.input_map[idx]
    z = vals @ w_rows
    norm = np.linalg.norm(z)
    h = z / norm
    batch = sampler.sample(h, t, m, rng)
    classes = np.concatenate([[t], batch.samples])
    rows = model.class_embeddings[classes]
    o = model.tau * (rows @ h)
    if absolute:
        sign = np.where(o < 0, -1.0, 1.0)
        o = np.abs(o)
    adjusted = adjust_sampled_logits(t, o[0], batch.samples, o[1:], batch.q_values)
    loss = sampled_loss(adjusted)
    coef = estimator_weights(adjusted)
    if absolute:
        coef = coef * sign
    if lr == 0.0:
        return loss
    g_h = model.tau * (coef @ rows)
    g_z = (g_h - (h @ g_h) * h) / norm

    uniq, inverse = np.unique(classes, return_inverse=True)
    class_coef = np.zeros(uniq.size)
    np.add.at(class_coef, inverse, coef)
    updated = model.class_embeddings[uniq] - lr * model.tau * np.outer(class_coef, h)
    updated /= np.linalg.norm(updated, axis=1, keepdims=True)
    model.class_embeddings[uniq] = updated
    model.input_map[idx] = w_rows - lr * np.outer(vals, g_z)
    sampler.update_classes(uniq, updated)
    return loss


def audit_tree(sampler, model, queries):
    """Max gap between the incrementally updated tree law and a fresh rebuild's law."""
    if not isinstance(sampler, KernelSampler):
        return float("nan")
    tree = sampler.tree
    fresh = SamplerTree(model.class_embeddings, tree.feature_map, eps=tree.eps, refresh_every=None)
    gap = 0.0
    for h in queries:
        q = tree.query_features(h)
        gap = max(gap, float(np.max(np.abs(tree.all_probabilities(q) - fresh.all_probabilities(q)))))
    return gap


def train_epoch(model, dataset, sampler, m, lr, rng, probe=None, absolute=False, epoch=0,
                audit_queries=4):
    """One pass of per-example SGD in a random order.

    ``sampler=None`` trains with the exact full-softmax gradient.  ``absolute``
    uses the absolute-softmax loss (quadratic-kernel baseline).
    """
    start = time.perf_counter()
    order = rng.permutation(len(dataset))
    total = 0.0
    scheme = "full" if sampler is None else sampler.name
    for i in order:
        idx, vals = dataset.row(i)
        t = int(dataset.labels[i])
        if sampler is None:
            loss = _step_full(model, idx, vals, t, lr)
        else:
            loss = _step_sampled(model, sampler, idx, vals, t, m, lr, rng, absolute)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at example {i} (label {t}, scheme {scheme}, lr {lr})"
            )
        total += loss
    elapsed = time.perf_counter() - start
    probe = dataset if probe is None else probe
    probe_loss = float(np.mean(full_losses(model, probe)))
    gap = float("nan")
    if isinstance(sampler, KernelSampler) and audit_queries:
        pick = rng.choice(len(probe), size=min(audit_queries, len(probe)), replace=False)
        gap = audit_tree(sampler, model, model.embed(probe.features[pick]))
    mean_loss = total / max(1, len(dataset))
    return EpochStats(epoch, scheme, mean_loss, probe_loss, lr, elapsed, gap)


def fit(model, train, sampler, epochs, lr, m=DEFAULT_M, seed=None, probe=None, absolute=False,
        plateau_tol=1e-4, callback=None):
    """Run ``epochs`` epochs, halving the learning rate when the probe loss stops improving."""
    rng = np.random.default_rng(seed)
    history = []
    best = float("inf")
    for epoch in range(1, epochs + 1):
        stats = train_epoch(model, train, sampler, m, lr, rng, probe=probe, absolute=absolute, epoch=epoch)
        history.append(stats)
        if callback is not None:
            callback(stats)
        if stats.probe_full_loss > best - plateau_tol:
            lr *= 0.5
            logger.info("epoch %d: probe loss plateaued, lr -> %g", epoch, lr)
        best = min(best, stats.probe_full_loss)
    return history
