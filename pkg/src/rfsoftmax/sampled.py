"""Sampled softmax: adjusted logits, sampled loss and the gradient estimator."""

from dataclasses import dataclass

import numpy as np

from rfsoftmax.embedding import SoftmaxState


@dataclass(frozen=True)
class AdjustedBatch:
    """Adjusted logits ``o'`` over ``[t, s_1, ..., s_m]`` and their softmax.

    ``adjusted_logits[0]`` is the raw target logit; entry ``i + 1`` is
    ``o_{s_i} - log(m q_{s_i})``.
    """

    target: int
    samples: np.ndarray
    adjusted_logits: np.ndarray
    log_partition: float
    probs: np.ndarray

    @property
    def partition(self):
        return float(np.exp(self.log_partition))

    @property
    def target_logit(self):
        return float(self.adjusted_logits[0])

    @property
    def m(self):
        return self.samples.shape[0]


def adjust_sampled_logits(target, target_logit, samples, sample_logits, q_values):
    """Build an :class:`AdjustedBatch` from the ``m + 1`` logits actually needed."""
    q_values = np.asarray(q_values, dtype=np.float64)
    sample_logits = np.asarray(sample_logits, dtype=np.float64)
    if np.any(q_values <= 0):
        raise ValueError("sampling probabilities must be strictly positive")
    m = q_values.shape[0]
    adjusted = np.empty(m + 1)
    adjusted[0] = target_logit
    adjusted[1:] = sample_logits - np.log(m * q_values)
    top = adjusted.max()
    scaled = np.exp(adjusted - top)
    total = scaled.sum()
    log_z = float(top + np.log(total))
    probs = scaled / total
    return AdjustedBatch(int(target), np.asarray(samples), adjusted, log_z, probs)


def adjust_logits(batch, logits):
    """Adjust a :class:`~rfsoftmax.samplers.SampledBatch` using full logits or a state."""
    if isinstance(logits, SoftmaxState):
        if logits.target != batch.target:
            raise ValueError("batch and state disagree on the target class")
        logits = logits.logits
    logits = np.asarray(logits, dtype=np.float64)
    return adjust_sampled_logits(
        batch.target, logits[batch.target], batch.samples, logits[batch.samples], batch.q_values
    )


def sampled_loss(adjusted):
    return -adjusted.target_logit + adjusted.log_partition


def estimator_weights(adjusted):
    """Coefficients of the gradient estimate over ``[t, s_1, ..., s_m]``.

    The estimate equals ``sum_k w_k grad o_{idx_k}`` with
    ``idx = [t, s_1, ..., s_m]``; ``w_0 = p'_0 - 1`` and ``w_k = p'_k`` otherwise.
    """
    w = adjusted.probs.copy()
    w[0] -= 1.0
    return w


def gradient_estimate(adjusted, logit_grads):
    """Sampled-softmax gradient estimate for an ``(n, P)`` logit gradient table.

    Equivalent to ``-grad o_t + (e^{o_t} grad o_t + sum_i r_i grad o_{s_i}) /
    (e^{o_t} + sum_i r_i)`` with ``r_i = e^{o_{s_i}} / (m q_{s_i})``.
    """
    logit_grads = np.asarray(logit_grads, dtype=np.float64)
    idx = np.concatenate([[adjusted.target], adjusted.samples]).astype(np.int64)
    return estimator_weights(adjusted) @ logit_grads[idx]


def absolute_softmax_loss(logits, batch):
    """Sampled cross entropy with ``|o_i|`` in place of ``o_i`` (quadratic-kernel baseline)."""
    if isinstance(logits, SoftmaxState):
        logits = logits.logits
    return sampled_loss(adjust_logits(batch, np.abs(np.asarray(logits, dtype=np.float64))))


def absolute_softmax_probs(logits):
    """Full absolute softmax ``e^{|o_i|} / sum_j e^{|o_j|}``."""
    a = np.abs(np.asarray(logits, dtype=np.float64))
    e = np.exp(a - a.max())
    return e / e.sum()
