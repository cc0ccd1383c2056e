import math

import numpy as np
import pytest
import scipy.sparse as sp

from rfsoftmax.data import SparseDataset, make_synthetic_mixture
from rfsoftmax.trainer import (
    Model,
    TrainingDivergedError,
    audit_tree,
    fit,
    full_losses,
    make_scheme,
    precision_at_k,
    tau_from_temperature,
    train_epoch,
)


def _separable(n_per=10):
    """Two classes, each carried by its own pair of features."""
    rows = [[1.0, 1.0, 0.0, 0.0]] * n_per + [[0.0, 0.0, 1.0, 1.0]] * n_per
    return SparseDataset(sp.csr_matrix(np.array(rows)), np.repeat([0, 1], n_per), 2)


def _mixture(seed=0):
    return make_synthetic_mixture(40, 200, 5, seed=seed)


def test_tau_from_temperature():
    assert tau_from_temperature(0.3) == pytest.approx(11.111111111111)
    assert tau_from_temperature(0.5) == 4.0


@pytest.mark.parametrize("scheme", ["full", "exp", "uniform", "rff"])
def test_zero_learning_rate_leaves_model_unchanged(scheme):
    data = _mixture()
    model = Model.init(data.num_features, data.num_labels, 8, tau=4.0, seed=0)
    before = model.copy()
    sampler = make_scheme(scheme, model, nu=4.0, num_frequencies=32, seed=0)
    train_epoch(model, data, sampler, 5, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(model.input_map, before.input_map)
    np.testing.assert_array_equal(model.class_embeddings, before.class_embeddings)


def test_separable_two_class_loss_decreases_monotonically():
    data = _separable()
    model = Model.init(4, 2, 4, tau=4.0, seed=1)
    sampler = make_scheme("exp", model)
    history = fit(model, data, sampler, epochs=5, lr=0.1, m=1, seed=0)
    losses = [s.probe_full_loss for s in history]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert precision_at_k(model, data, 1) == 1.0


def test_precision_at_k_examples():
    data = _separable(3)
    model = Model.init(4, 2, 4, tau=4.0, seed=2)
    assert precision_at_k(model, data, 2) == 1.0
    single = SparseDataset(sp.csr_matrix(np.array([[1.0, 0.0, 0.0, 0.0]])), [1], 2)
    model.input_map[:] = 0.0
    model.input_map[0, 0] = 1.0
    model.class_embeddings[:] = [[1.0, 0, 0, 0], [0, 1.0, 0, 0]]
    assert precision_at_k(model, single, 1) == 0.0
    model.class_embeddings[:] = [[0, 1.0, 0, 0], [1.0, 0, 0, 0]]
    assert precision_at_k(model, single, 1) == 1.0
    with pytest.raises(ValueError):
        precision_at_k(model, single, 3)


def test_precision_random_model_near_chance():
    n = 50
    rng = np.random.default_rng(4)
    feats = sp.random(2000, 300, density=0.02, random_state=4, format="csr")
    feats = feats + sp.csr_matrix((np.ones(2000), (np.arange(2000), rng.integers(0, 300, 2000))), shape=(2000, 300))
    data = SparseDataset(feats, rng.integers(0, n, 2000), n)
    model = Model.init(data.num_features, n, 16, tau=1.0, seed=3)
    p1 = precision_at_k(model, data, 1)
    sigma = math.sqrt((1 / n) * (1 - 1 / n) / len(data))
    assert abs(p1 - 1 / n) < 3 * sigma + 1e-12


@pytest.mark.parametrize("scheme", ["full", "uniform", "rff", "quadratic"])
def test_class_rows_stay_unit_norm(scheme):
    data = _mixture(1)
    model = Model.init(data.num_features, data.num_labels, 8, tau=4.0, seed=0)
    sampler = make_scheme(scheme, model, nu=4.0, num_frequencies=32, seed=0)
    train_epoch(model, data, sampler, 5, 0.05, np.random.default_rng(0), absolute=scheme == "quadratic")
    np.testing.assert_allclose(np.linalg.norm(model.class_embeddings, axis=1), 1.0, atol=1e-12)


def test_tree_matches_rebuild_after_training():
    data = _mixture(2)
    model = Model.init(data.num_features, data.num_labels, 8, tau=4.0, seed=0)
    sampler = make_scheme("rff", model, nu=4.0, num_frequencies=64, seed=0)
    stats = train_epoch(model, data, sampler, 10, 0.05, np.random.default_rng(1))
    assert stats.audit_max_gap < 1e-6
    assert audit_tree(sampler, model, model.embed(data.features[:5])) < 1e-6
    assert math.isnan(audit_tree(make_scheme("uniform", model), model, []))


@pytest.mark.parametrize("scheme", ["exp", "rff"])
def test_training_is_bit_reproducible(scheme):
    data = _mixture(3)
    results = []
    for _ in range(2):
        model = Model.init(data.num_features, data.num_labels, 8, tau=4.0, seed=5)
        sampler = make_scheme(scheme, model, nu=4.0, num_frequencies=32, seed=6)
        history = fit(model, data, sampler, epochs=2, lr=0.05, m=5, seed=7)
        results.append((model.class_embeddings.tobytes(), [h.probe_full_loss for h in history]))
    assert results[0] == results[1]


def test_training_reduces_full_loss():
    data = _mixture(4)
    model = Model.init(data.num_features, data.num_labels, 16, tau=4.0, seed=0)
    start = full_losses(model, data).mean()
    fit(model, data, make_scheme("uniform", model), epochs=3, lr=0.1, m=10, seed=0)
    assert full_losses(model, data).mean() < start


def test_plateau_halves_learning_rate():
    data = _separable(4)
    model = Model.init(4, 2, 4, tau=4.0, seed=1)
    history = fit(model, data, make_scheme("uniform", model), epochs=3, lr=0.0, m=1, seed=0)
    assert [h.lr for h in history] == [0.0, 0.0, 0.0]
    history = fit(model, data, make_scheme("uniform", model), epochs=3, lr=0.1, m=1, seed=0,
                  plateau_tol=1e9)
    assert [h.lr for h in history] == [0.1, 0.1, 0.05]


def test_non_finite_loss_raises():
    data = _separable(2)
    model = Model.init(4, 2, 4, tau=4.0, seed=0)
    model.class_embeddings[0] = np.nan
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train_epoch(model, data, None, 1, 0.1, np.random.default_rng(0))
