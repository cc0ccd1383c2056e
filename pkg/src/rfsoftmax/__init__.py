"""Sampled softmax with kernel-based negative sampling (Random Fourier Features)."""

from rfsoftmax._kernels import BACKEND
from rfsoftmax.bias import (
    BiasBounds,
    BiasReport,
    compute_bound_terms,
    cauchy_schwarz_diagnostics,
    exact_expected_gradient,
    exact_expected_partition,
    make_instance,
    mc_bias_report,
    ratio_check,
)
from rfsoftmax.embedding import (
    SoftmaxState,
    compute_softmax_state,
    full_gradient,
    full_loss,
    normalize,
)
from rfsoftmax.features import MaclaurinMap, QuadraticMap, RffMap, build_rff, kernel_mse
from rfsoftmax.sampled import (
    AdjustedBatch,
    absolute_softmax_loss,
    adjust_logits,
    gradient_estimate,
    sampled_loss,
)
from rfsoftmax.samplers import SampledBatch, make_sampler, sample_negatives
from rfsoftmax.tree import SamplerTree, build_tree

__version__ = "0.1.0"
