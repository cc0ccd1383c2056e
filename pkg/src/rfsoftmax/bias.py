"""Gradient-bias measurement for sampled softmax.

Three routes to ``E_q[grad L'] - grad L``:

* leading-order bound terms computed in closed form from ``(o, q, M, m)``,
* exact expectation by enumerating every ``m``-tuple of negatives,
* Monte Carlo over independent batches.

All inputs take a :class:`~rfsoftmax.embedding.SoftmaxState` and a law ``q``
given as a length-``n`` vector.  ``q`` is renormalized over the negatives
``N_t`` (its value at the target is ignored) and must be positive there.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from rfsoftmax.embedding import compute_softmax_state, full_gradient, normalize, normalize_rows
from rfsoftmax.samplers import draw_from_law

ENUMERATION_BUDGET = 1_000_000


class EnumerationBudgetError(ValueError):
    pass


def make_instance(n, d, tau, spread=1.0, seed=None, target=0):
    """Random unit query ``h`` and ``n`` unit classes, plus the softmax state.

    With ``spread > 0`` classes are ``normalize(h + spread * g / sqrt(d))``
    for standard normal ``g``, i.e. clustered in a cap around ``h`` (smaller
    spread, tighter cap).  ``spread <= 0`` draws classes uniformly on the sphere.
    The logit gradient table returned is w.r.t. ``h``: row ``i`` is ``tau c_i``.
    """
    rng = np.random.default_rng(seed)
    h = normalize(rng.standard_normal(d))
    g = rng.standard_normal((n, d))
    classes = normalize_rows(h + spread * g / np.sqrt(d)) if spread > 0 else normalize_rows(g)
    state = compute_softmax_state(h, classes, tau, target)
    return h, classes, state, tau * classes


def _negative_law(state, q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (state.n,):
        raise ValueError(f"q must have shape ({state.n},), got {q.shape}")
    neg = state.negatives
    qn = q[neg]
    if np.any(~np.isfinite(qn)) or np.any(qn <= 0):
        raise ValueError("q must be strictly positive on every negative class")
    return neg, qn / qn.sum()


def _scaled_exp(state):
    shift = float(np.max(state.logits))
    return np.exp(state.logits - shift), shift


@dataclass(frozen=True)
class BiasBounds:
    """Leading terms of the bias bounds (o(1/m) remainders are not included).

    ``LB = lb_term * 1`` and ``UB = ub1 * g + (2 M / m) * ub2 * 1``.
    """

    m: int
    M: float
    Z: float
    Z_t: float
    g: np.ndarray
    lb_term: float
    ub1: float
    ub2: float
    sum_sq_ratio: float
    max_ratio_gap: float
    partition_gaps: np.ndarray

    def lower_bound(self):
        return np.full(self.g.shape, self.lb_term)

    def upper_bound(self):
        return self.ub1 * self.g + (2.0 * self.M / self.m) * self.ub2


def cauchy_schwarz_diagnostics(state, q):
    """``(sum_j e^{2o_j}/q_j, max_{j,j'} |e^{o_j}/q_j - e^{o_j'}/q_j'|, |Z_t - e^{o_k}/q_k|_k)``.

    The third entry is a length ``n - 1`` vector over the negatives in index order.
    """
    neg, qn = _negative_law(state, q)
    e, shift = _scaled_exp(state)
    en = e[neg]
    ratio = en / qn
    z_t = en.sum()
    scale = np.exp(shift)
    sum_sq = float(np.sum(en * ratio)) * scale**2
    max_gap = float(ratio.max() - ratio.min()) * scale
    gaps = np.abs(z_t - ratio) * scale
    return sum_sq, max_gap, gaps


def compute_bound_terms(state, q, logit_grads, m):
    if m < 1:
        raise ValueError("m must be >= 1")
    logit_grads = np.asarray(logit_grads, dtype=np.float64)
    neg, qn = _negative_law(state, q)
    e, shift = _scaled_exp(state)
    en = e[neg]
    ratio = en / qn
    z = e.sum()
    z_t = en.sum()
    sum_sq = np.sum(en * ratio)
    M = float(np.max(np.abs(logit_grads)))
    scale = np.exp(shift)

    lb_term = -M * np.sum(en * np.abs(z_t - ratio)) / (m * z**2)
    ub1 = (sum_sq - z_t**2) / (m * z**3) / scale
    ub2 = (ratio.max() - ratio.min()) * z_t / (z**2 + sum_sq)
    g = (en @ logit_grads[neg]) * scale
    return BiasBounds(
        m=int(m),
        M=M,
        Z=float(z * scale),
        Z_t=float(z_t * scale),
        g=g,
        lb_term=float(lb_term),
        ub1=float(ub1),
        ub2=float(ub2),
        sum_sq_ratio=float(sum_sq * scale**2),
        max_ratio_gap=float((ratio.max() - ratio.min()) * scale),
        partition_gaps=np.abs(z_t - ratio) * scale,
    )


def _tuples(k, m, budget):
    total = k**m
    if total > budget:
        raise EnumerationBudgetError(f"{k}^{m} = {total} tuples exceeds the budget of {budget}")
    return np.array(list(itertools.product(range(k), repeat=m)), dtype=np.int64).reshape(total, m)


def _coefficients(e, t, neg, qn, positions, m):
    """Per-tuple weights on ``[t] + neg`` of the gradient estimate, plus ``V``."""
    r = e[neg][positions] / (m * qn[positions])
    v = e[t] + r.sum(axis=1)
    return r / v[:, None], e[t] / v - 1.0, v


def exact_expected_gradient(state, q, logit_grads, m, budget=ENUMERATION_BUDGET):
    """``E_q[grad L']`` by summing over all ``(n-1)^m`` ordered tuples."""
    logit_grads = np.asarray(logit_grads, dtype=np.float64)
    neg, qn = _negative_law(state, q)
    positions = _tuples(neg.size, m, budget)
    weight = np.prod(qn[positions], axis=1)
    e, _ = _scaled_exp(state)
    sample_coef, target_coef, _ = _coefficients(e, state.target, neg, qn, positions, m)
    coef = np.zeros(state.n)
    coef[state.target] = weight @ target_coef
    np.add.at(coef, neg[positions].ravel(), (weight[:, None] * sample_coef).ravel())
    return coef @ logit_grads


def exact_expected_partition(state, q, m, budget=ENUMERATION_BUDGET):
    """``E_q[Z']`` by enumeration; equals ``Z`` whenever ``q`` is the true law."""
    neg, qn = _negative_law(state, q)
    positions = _tuples(neg.size, m, budget)
    weight = np.prod(qn[positions], axis=1)
    e, shift = _scaled_exp(state)
    z_prime = e[state.target] + np.sum(e[neg][positions] / (m * qn[positions]), axis=1)
    return float(weight @ z_prime) * float(np.exp(shift))


@dataclass
class BiasReport:
    scheme: str
    trials: int
    bias: np.ndarray
    stderr: np.ndarray
    bounds: BiasBounds = field(repr=False)

    @property
    def bias_l2(self):
        return float(np.linalg.norm(self.bias))

    @property
    def stderr_l2(self):
        return float(np.linalg.norm(self.stderr))


def mc_gradient_samples(state, q, logit_grads, m, trials, rng, chunk=20_000):
    """Yield blocks of per-trial gradient estimates, drawing negatives from ``q``."""
    logit_grads = np.asarray(logit_grads, dtype=np.float64)
    neg, qn = _negative_law(state, q)
    e, _ = _scaled_exp(state)
    t = state.target
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        positions = draw_from_law(qn, (size, m), rng)
        sample_coef, target_coef, _ = _coefficients(e, t, neg, qn, positions, m)
        coef = np.zeros((size, state.n))
        coef[:, t] = target_coef
        rows = np.repeat(np.arange(size), m)
        np.add.at(coef, (rows, neg[positions].ravel()), sample_coef.ravel())
        yield coef @ logit_grads
        done += size


def mc_bias_report(state, q, logit_grads, m, trials, rng, scheme="custom", chunk=20_000):
    """Monte Carlo estimate of ``E_q[grad L'] - grad L`` with per-coordinate standard errors."""
    if trials < 2:
        raise ValueError("need at least two trials for a standard error")
    count = 0
    mean = None
    m2 = None
    for block in mc_gradient_samples(state, q, logit_grads, m, trials, rng, chunk):
        # Chan et al. parallel merge of (count, mean, M2)
        b_count = block.shape[0]
        b_mean = block.mean(axis=0)
        b_m2 = ((block - b_mean) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = b_count, b_mean, b_m2
            continue
        delta = b_mean - mean
        total = count + b_count
        mean = mean + delta * (b_count / total)
        m2 = m2 + b_m2 + delta**2 * (count * b_count / total)
        count = total
    stderr = np.sqrt(m2 / (count - 1) / count)
    bias = mean - full_gradient(state, logit_grads)
    return BiasReport(scheme, count, bias, stderr, compute_bound_terms(state, q, logit_grads, m))


@dataclass
class RatioCheck:
    ratios: np.ndarray
    envelope: np.ndarray
    max_dev: float
    mean_dev: float
    fraction_in_band: float
    envelope_corr: float


def ratio_check(state, q, nu, band=0.1):
    """Normalized ratios ``r_i = e^{o_i} / (q_i Z_t)`` over the negatives.

    The envelope is ``exp((tau - nu) h.c_i)`` with ``h.c_i = o_i / tau``.
    ``fraction_in_band`` counts classes with ``|r_i / envelope_i - 1| <= band``;
    ``envelope_corr`` is the Pearson correlation of ``log r_i`` with
    ``(tau - nu) h.c_i`` (NaN when that exponent is constant, e.g. nu = tau).
    """
    neg, qn = _negative_law(state, q)
    e, _ = _scaled_exp(state)
    en = e[neg]
    ratios = en / qn / en.sum()
    exponent = (state.tau - nu) * state.logits[neg] / state.tau
    envelope = np.exp(exponent)
    dev = np.abs(ratios - 1.0)
    in_band = float(np.mean(np.abs(ratios / envelope - 1.0) <= band))
    if np.ptp(exponent) > 0 and np.ptp(ratios) > 0:
        corr = float(np.corrcoef(np.log(ratios), exponent)[0, 1])
    else:
        corr = float("nan")
    return RatioCheck(ratios, envelope, float(dev.max()), float(dev.mean()), in_band, corr)
