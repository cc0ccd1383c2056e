"""Desk-scale measurement protocols behind the command-line runner.

Each ``*_rows`` function returns a list of flat dicts (one per CSV row) and is
deterministic given its seeds, except for columns holding wall-clock times.
The CLI layer only parses flags, writes CSV and maps errors to exit codes.
"""

import logging
import math
import os
import time

import numpy as np

from rfsoftmax.bias import (
    EnumerationBudgetError,
    compute_bound_terms,
    exact_expected_gradient,
    make_instance,
    mc_bias_report,
    ratio_check,
)
from rfsoftmax.data import make_synthetic_mixture, train_test_split
from rfsoftmax.embedding import full_gradient, normalize_rows
from rfsoftmax.features import MaclaurinMap, QuadraticMap, build_rff, fit_quadratic, kernel_mse
from rfsoftmax.sampled import adjust_sampled_logits, sampled_loss
from rfsoftmax.samplers import make_sampler
from rfsoftmax.trainer import Model, fit, make_scheme, precision_at_k

logger = logging.getLogger(__name__)

KERNEL_SCHEMES = ("rff", "quadratic")


class ConfigError(ValueError):
    """Invalid or unsatisfiable experiment configuration."""


class MemoryEstimateError(ConfigError):
    pass


def seed_list(seed, repeats):
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    return [seed + k for k in range(repeats)]


def random_pairs(num_pairs, d, rng):
    """Independent uniformly random unit vectors ``x[k], y[k]``."""
    x = normalize_rows(rng.standard_normal((num_pairs, d)))
    y = normalize_rows(rng.standard_normal((num_pairs, d)))
    return x, y


# ---------------------------------------------------------------------------
# kernel approximation quality
# ---------------------------------------------------------------------------


def kernel_mse_rows(d, dims, num_pairs, seeds, kernel_tau, maclaurin=True, quadratic=True):
    """MSE of each approximation of ``exp(kernel_tau x.y)`` on random unit pairs.

    RFF uses ``nu = kernel_tau`` and the ``e^nu phi(x).phi(y)`` estimate, at
    every ``D`` in ``dims`` (feature dimension ``2D``).  Random Maclaurin uses
    ``2D`` features so both sit at the same feature budget.  The quadratic map
    is reported twice: with least-squares ``(alpha, beta)`` against the
    exponential kernel, and against its own closed form (always 0).
    """
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x, y = random_pairs(num_pairs, d, rng)
        for D in dims:
            fmap = build_rff(d, D, kernel_tau, seed=rng.integers(2**63))
            rows.append(dict(method="rff", target="exp", D=D, features=fmap.dim, seed=seed,
                             mse=kernel_mse(fmap, x, y, tau=kernel_tau)))
            if maclaurin:
                mmap = MaclaurinMap(d, 2 * D, kernel_tau, seed=rng.integers(2**63))
                rows.append(dict(method="maclaurin", target="exp", D=D, features=mmap.dim, seed=seed,
                                 mse=kernel_mse(mmap, x, y, tau=kernel_tau)))
        if quadratic:
            alpha, beta = fit_quadratic(x, y, kernel_tau)
            if alpha <= 0:
                # the least-squares fit can go negative on tiny pair sets; fall back to alpha ~ 0
                alpha = np.finfo(float).tiny
            qmap = QuadraticMap(d, alpha=alpha, beta=max(beta, 0.0))
            rows.append(dict(method="quadratic", target="exp", D=0, features=qmap.dim, seed=seed,
                             mse=kernel_mse(qmap, x, y, tau=kernel_tau)))
            rows.append(dict(method="quadratic", target="own", D=0, features=qmap.dim, seed=seed,
                             mse=kernel_mse(qmap, x[:64], y[:64])))
    return rows


# ---------------------------------------------------------------------------
# wall time
# ---------------------------------------------------------------------------


def available_memory_bytes():
    """``MemAvailable`` from ``/proc/meminfo``, else free physical pages, else ``None``."""
    try:
        with open("/proc/meminfo") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def estimate_memory_bytes(scheme, n, d, num_frequencies=None, batch=10):
    """Rough peak bytes for building ``scheme`` over ``n`` classes and sampling from it."""
    classes = 8 * n * d
    if scheme == "rff":
        feature_dim = 2 * num_frequencies
    elif scheme == "quadratic":
        feature_dim = d * d + 1
    else:
        feature_dim = 0
    if feature_dim:
        capacity = 1 << max(1, math.ceil(math.log2(n)))
        tree = 2 * capacity * (8 * feature_dim + 8)
        build_chunk = 8 * min(n, 65536) * feature_dim
        return classes + tree + build_chunk
    # exp: logits, exp, cumulative sum and a temporary per query
    return classes + 4 * 8 * n * batch


def check_memory(scheme, n, d, num_frequencies=None, limit=None, fraction=0.8):
    need = estimate_memory_bytes(scheme, n, d, num_frequencies)
    have = available_memory_bytes() if limit is None else limit
    if have is not None and need > fraction * have:
        raise MemoryEstimateError(
            f"{scheme} at n={n} needs about {need / 2**30:.2f} GiB, "
            f"more than {fraction:.0%} of the {have / 2**30:.2f} GiB available"
        )
    return need


def time_sampled_loss(sampler, classes, tau, m, batch, num_samples, rng, warmup_fraction=0.1):
    """Per-sample wall time of drawing negatives and evaluating the sampled loss.

    A "sample" is one drawn negative class; each batch holds ``batch`` random
    unit queries with random targets and draws ``m`` negatives per query, so it
    accounts for ``batch * m`` samples.  At least ``num_samples`` samples are
    timed after discarding the first ``warmup_fraction`` of batches.
    Returns ``(mean_us, p50_us, timed_samples)``.
    """
    n, d = classes.shape
    per_batch = batch * m
    timed_batches = max(1, math.ceil(num_samples / per_batch))
    warmup = max(1, math.ceil(warmup_fraction * timed_batches / (1.0 - warmup_fraction)))
    queries = normalize_rows(rng.standard_normal((warmup + timed_batches, batch, d)).reshape(-1, d))
    queries = queries.reshape(warmup + timed_batches, batch, d)
    targets = rng.integers(n, size=(warmup + timed_batches, batch))
    elapsed = np.empty(warmup + timed_batches)
    sink = 0.0
    for b in range(warmup + timed_batches):
        start = time.perf_counter_ns()
        for h, t in zip(queries[b], targets[b]):
            drawn = sampler.sample(h, int(t), m, rng)
            o_t = tau * float(classes[t] @ h)
            o_s = tau * (classes[drawn.samples] @ h)
            sink += sampled_loss(adjust_sampled_logits(int(t), o_t, drawn.samples, o_s, drawn.q_values))
        elapsed[b] = time.perf_counter_ns() - start
    if not math.isfinite(sink):
        raise FloatingPointError("non-finite sampled loss during timing")
    per_sample_us = elapsed[warmup:] / per_batch / 1e3
    return float(per_sample_us.mean()), float(np.median(per_sample_us)), timed_batches * per_batch


def random_classes(n, d, rng, chunk=1 << 16):
    out = np.empty((n, d))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        out[start:stop] = normalize_rows(rng.standard_normal((stop - start, d)))
    return out


def walltime_rows(schemes, sizes, dims, d=64, m=10, batch=10, num_samples=10_000, seed=0, tau=1.0,
                  nu=1.0, alpha=100.0, memory_limit=None):
    """Per-sample timing for every ``(scheme, n)`` and, for RFF, every ``D``.

    Memory is checked for every configuration before anything is timed.
    """
    if num_samples < 10_000:
        raise ConfigError("wall-time runs need at least 10^4 samples")
    configs = []
    for scheme in schemes:
        for n in sizes:
            for D in (dims if scheme == "rff" else [0]):
                check_memory(scheme, n, d, D, limit=memory_limit)
                configs.append((scheme, n, D))
    rows = []
    for scheme, n, D in configs:
        rng = np.random.default_rng(seed)
        classes = random_classes(n, d, rng)
        sampler = make_sampler(scheme, classes, tau=tau, nu=nu, num_frequencies=D or None,
                               alpha=alpha, seed=seed)
        mean_us, p50_us, count = time_sampled_loss(sampler, classes, tau, m, batch, num_samples, rng)
        logger.info("%s n=%d D=%d: %.1f us/sample", scheme, n, D, mean_us)
        rows.append(dict(scheme=scheme, n=n, D=D, m=m, batch=batch, samples=count,
                         mean_us=mean_us, p50_us=p50_us))
        del sampler, classes
    return rows


# ---------------------------------------------------------------------------
# gradient bias
# ---------------------------------------------------------------------------


def scheme_law(scheme, classes, h, t, tau, nu=None, num_frequencies=None, alpha=100.0, seed=None):
    """The negative-sampling law of ``scheme`` for query ``h`` as a length-``n`` vector."""
    sampler = make_sampler(scheme, classes, tau=tau, nu=nu, num_frequencies=num_frequencies,
                           alpha=alpha, seed=seed)
    return sampler.negative_probabilities(h, t)


def bias_rows(schemes, n, d, m, trials, seeds, tau, nu, num_frequencies, alpha=100.0, spread=1.0,
              exact=False):
    """Measured gradient bias and the leading bound terms, per scheme and seed.

    Instances come from :func:`~rfsoftmax.bias.make_instance` and gradients are
    taken with respect to ``h``.  With ``exact=True`` the expectation is
    enumerated (raises :class:`ConfigError` past the enumeration budget) and
    ``stderr_l2`` is 0; otherwise ``trials`` Monte Carlo batches are used.
    """
    rows = []
    for seed in seeds:
        h, classes, state, grads = make_instance(n, d, tau, spread=spread, seed=seed)
        for k, scheme in enumerate(schemes):
            q = scheme_law(scheme, classes, h, state.target, tau, nu, num_frequencies, alpha, seed=seed)
            if exact:
                try:
                    expected = exact_expected_gradient(state, q, grads, m)
                except EnumerationBudgetError as exc:
                    raise ConfigError(str(exc)) from exc
                bias = expected - full_gradient(state, grads)
                stderr = np.zeros_like(bias)
                bounds = compute_bound_terms(state, q, grads, m)
            else:
                rng = np.random.default_rng([seed, k])
                report = mc_bias_report(state, q, grads, m, trials, rng, scheme=scheme)
                bias, stderr, bounds = report.bias, report.stderr, report.bounds
            rows.append(dict(
                scheme=scheme, m=m, seed=seed,
                bias_l2=float(np.linalg.norm(bias)),
                stderr_l2=float(np.linalg.norm(stderr)),
                lb_term_l2=abs(bounds.lb_term) * math.sqrt(bias.size),
                ub1=bounds.ub1, ub2=bounds.ub2,
                sum_sq_ratio=bounds.sum_sq_ratio, z_t_sq=bounds.Z_t**2,
                max_ratio_gap=bounds.max_ratio_gap,
                mean_partition_gap=float(np.mean(bounds.partition_gaps)),
            ))
    return rows


# ---------------------------------------------------------------------------
# RFF / softmax ratio
# ---------------------------------------------------------------------------


def ratio_rows(n, d, dims, seeds, tau, nu, spread=1.0, band=0.1):
    """Per-seed ratio diagnostics plus one median row per ``D``."""
    rows = []
    for D in dims:
        per_seed = []
        for seed in seeds:
            h, classes, state, _ = make_instance(n, d, tau, spread=spread, seed=seed)
            q = scheme_law("rff", classes, h, state.target, tau, nu, D, seed=seed)
            check = ratio_check(state, q, nu, band=band)
            per_seed.append(check)
            rows.append(dict(kind="seed", D=D, nu=nu, seed=seed, max_dev=check.max_dev,
                             mean_dev=check.mean_dev, fraction_in_band=check.fraction_in_band,
                             envelope_corr=check.envelope_corr))
        rows.append(dict(
            kind="median", D=D, nu=nu, seed="",
            max_dev=float(np.median([c.max_dev for c in per_seed])),
            mean_dev=float(np.median([c.mean_dev for c in per_seed])),
            fraction_in_band=float(np.median([c.fraction_in_band for c in per_seed])),
            envelope_corr=float(np.median([c.envelope_corr for c in per_seed])),
        ))
    return rows


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def synthetic_split(num_classes, num_features, per_class, test_fraction, seed):
    data = make_synthetic_mixture(num_classes, num_features, per_class, seed=seed)
    return train_test_split(data, test_fraction, seed=seed)


def train_rows(train, test, schemes, d, m, epochs, lr, seeds, tau, nu, num_frequencies, alpha=100.0,
               absolute=False, ks=(1, 3, 5), rff_precision="double"):
    """Per-epoch training statistics for each scheme and seed (paired: same init per seed)."""
    ks = [k for k in ks if k <= train.num_labels]
    rows = []
    for seed in seeds:
        for scheme in schemes:
            model = Model.init(train.num_features, train.num_labels, d, tau, seed=seed)
            sampler = make_scheme(scheme, model, m=m, nu=nu, num_frequencies=num_frequencies,
                                  alpha=alpha, seed=seed, rff_precision=rff_precision)

            def record(stats, scheme=scheme, seed=seed, model=model):
                row = dict(epoch=stats.epoch, scheme=scheme, seed=seed,
                           mean_sampled_loss=stats.mean_sampled_loss,
                           probe_full_loss=stats.probe_full_loss)
                for k in ks:
                    row[f"prec@{k}"] = precision_at_k(model, test, k)
                row.update(lr=stats.lr, audit_max_gap=stats.audit_max_gap, seconds=stats.seconds)
                rows.append(row)

            fit(model, train, sampler, epochs, lr, m=m, seed=seed, probe=test,
                absolute=absolute and scheme == "quadratic", callback=record)
    return rows


def train_columns(ks=(1, 3, 5), num_labels=None):
    ks = [k for k in ks if num_labels is None or k <= num_labels]
    return (["epoch", "scheme", "seed", "mean_sampled_loss", "probe_full_loss"]
            + [f"prec@{k}" for k in ks] + ["lr", "audit_max_gap", "seconds"])
