import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from rfsoftmax.embedding import random_unit_vectors
from rfsoftmax.features import LinearMap, QuadraticMap, build_rff
from rfsoftmax.tree import (
    DegenerateDistributionError,
    SamplerTree,
    build_tree,
    exact_probability,
    sample_class,
    update_class,
)


def _rebuild_gap(tree, classes):
    fresh = SamplerTree(classes, tree.feature_map, eps=tree.eps)
    return float(np.max(np.abs(fresh.node_sums - tree.node_sums)))


def _descent_oracle(tree, query, leaf):
    """Product of left/right ratios computed from ``node_masses`` in plain Python."""
    masses = tree.node_masses(query)
    node = tree.capacity + leaf
    prob = 1.0
    while node > 1:
        parent = node // 2
        left, right = masses[2 * parent], masses[2 * parent + 1]
        prob *= (left if node % 2 == 0 else right) / (left + right)
        node = parent
    return prob


def test_two_class_root_is_sum_of_leaves():
    rng = np.random.default_rng(0)
    classes = random_unit_vectors(rng, 2, 4)
    fmap = build_rff(4, 8, nu=1.0, seed=0)
    tree = build_tree(classes, fmap)
    np.testing.assert_allclose(tree.root_sum, fmap.transform(classes).sum(axis=0), atol=1e-15)
    assert tree.depth == 1 and tree.capacity == 2


def test_padding_leaves_are_zero():
    rng = np.random.default_rng(1)
    classes = random_unit_vectors(rng, 5, 3)
    fmap = QuadraticMap(3)
    tree = SamplerTree(classes, fmap)
    assert tree.capacity == 8
    np.testing.assert_array_equal(tree.node_sums[tree.capacity + 5 :], 0.0)
    np.testing.assert_array_equal(tree.counts[tree.capacity + 5 :], 0)
    np.testing.assert_allclose(tree.root_sum, fmap.transform(classes).sum(axis=0), rtol=1e-12)
    assert tree.counts[1] == 5


def test_internal_sums_match_children():
    rng = np.random.default_rng(2)
    tree = SamplerTree(random_unit_vectors(rng, 64, 6), build_rff(6, 16, nu=2.0, seed=1))
    for k in range(1, tree.capacity):
        np.testing.assert_allclose(tree.node_sums[k], tree.node_sums[2 * k] + tree.node_sums[2 * k + 1],
                                   rtol=1e-9, atol=1e-12)
    assert tree.max_internal_gap() < 1e-12


def test_needs_two_classes():
    with pytest.raises(ValueError):
        SamplerTree(np.ones((1, 2)), LinearMap(2))


def test_identical_classes_sample_uniformly():
    c = np.tile(np.array([[0.6, 0.8]]), (4, 1))
    tree = SamplerTree(c, build_rff(2, 32, nu=1.0, seed=0))
    query = tree.query_features(np.array([1.0, 0.0]))
    draws = tree.sample(query, np.random.default_rng(0), 100_000)
    freq = np.bincount(draws, minlength=4) / draws.size
    sigma = np.sqrt(0.25 * 0.75 / draws.size)
    assert np.all(np.abs(freq - 0.25) < 3 * sigma)
    assert exact_probability(tree, query, 2) == pytest.approx(0.25, abs=1e-15)


def test_injected_masses_chi_square():
    tree = SamplerTree(np.array([[1.0], [2.0], [3.0], [4.0]]), LinearMap(1))
    query = np.array([1.0])
    draws = tree.sample(query, np.random.default_rng(1), 100_000)
    counts = np.bincount(draws, minlength=4)
    expected = np.array([0.1, 0.2, 0.3, 0.4]) * draws.size
    assert stats.chisquare(counts, expected).pvalue > 0.01
    for i, p in enumerate([0.1, 0.2, 0.3, 0.4]):
        assert tree.exact_probability(query, i) == pytest.approx(p, rel=1e-14)


@pytest.mark.slow
def test_quadratic_tree_matches_bruteforce_law():
    rng = np.random.default_rng(3)
    d = 4
    classes = random_unit_vectors(rng, 10, d)
    h = random_unit_vectors(rng, 1, d)[0]
    fmap = QuadraticMap(d, alpha=100.0)
    tree = SamplerTree(classes, fmap)
    brute = oracles.tree_law_bruteforce([oracles.quadratic_kernel(h, c, 100.0) for c in classes])
    draws = tree.sample(tree.query_features(h), rng, 1_000_000)
    freq = np.bincount(draws, minlength=10) / draws.size
    assert 0.5 * np.abs(freq - brute).sum() < 0.01
    np.testing.assert_allclose(tree.all_probabilities(tree.query_features(h)), brute, rtol=1e-10)


def test_exact_probabilities_sum_to_one_and_match_descent():
    rng = np.random.default_rng(4)
    classes = random_unit_vectors(rng, 23, 5)
    tree = SamplerTree(classes, build_rff(5, 12, nu=4.0, seed=2), eps=1e-3)
    query = tree.query_features(random_unit_vectors(rng, 1, 5)[0])
    probs = np.array([tree.exact_probability(query, i) for i in range(23)])
    assert probs.sum() == pytest.approx(1.0, abs=1e-10)
    for i in range(23):
        assert probs[i] == pytest.approx(_descent_oracle(tree, query, i), rel=1e-12)
    np.testing.assert_allclose(tree.all_probabilities(query), probs, rtol=1e-12)
    np.testing.assert_allclose(tree.path_probabilities(query, np.arange(23)), probs, rtol=1e-12)


def test_sample_reports_exact_probabilities():
    rng = np.random.default_rng(5)
    tree = SamplerTree(random_unit_vectors(rng, 40, 6), build_rff(6, 20, nu=2.0, seed=3))
    query = tree.query_features(random_unit_vectors(rng, 1, 6)[0])
    leaves, probs = tree.sample_with_probabilities(query, rng, 200)
    np.testing.assert_allclose(probs, tree.path_probabilities(query, leaves), rtol=1e-12)


def test_empirical_frequency_within_three_sigma():
    rng = np.random.default_rng(6)
    tree = SamplerTree(random_unit_vectors(rng, 16, 4), build_rff(4, 32, nu=2.0, seed=4))
    query = tree.query_features(random_unit_vectors(rng, 1, 4)[0])
    n_draws = 200_000
    draws = tree.sample(query, rng, n_draws)
    freq = np.bincount(draws, minlength=16) / n_draws
    p = tree.all_probabilities(query)
    sigma = np.sqrt(p * (1 - p) / n_draws)
    assert np.all(np.abs(freq - p) <= 3.5 * sigma + 1e-12)


def test_negative_masses_are_floored():
    # masses 5, -3, 2, -1 through the linear map; eps floor keeps everything positive
    tree = SamplerTree(np.array([[5.0], [-3.0], [2.0], [-1.0]]), LinearMap(1), eps=0.5)
    probs = tree.all_probabilities(np.array([1.0]))
    assert np.all(probs > 0)
    assert probs.sum() == pytest.approx(1.0)
    # left subtree raw sum 2 (above its floor 1), right raw sum 1 (floor 1)
    assert probs[0] + probs[1] == pytest.approx(2.0 / 3.0)


def test_degenerate_distribution_raises():
    tree = SamplerTree(np.zeros((4, 2)), LinearMap(2), eps=0.0)
    query = np.array([1.0, 1.0])
    with pytest.raises(DegenerateDistributionError, match="degenerate sampling distribution"):
        tree.sample(query, np.random.default_rng(0), 3)
    with pytest.raises(DegenerateDistributionError):
        tree.exact_probability(query, 0)


def test_query_shape_checked():
    tree = SamplerTree(np.eye(3), LinearMap(3))
    with pytest.raises(ValueError):
        tree.sample(np.ones(4), np.random.default_rng(0))


def test_update_with_identical_embedding_is_noop():
    rng = np.random.default_rng(7)
    classes = random_unit_vectors(rng, 12, 5)
    tree = SamplerTree(classes, build_rff(5, 16, nu=1.0, seed=5))
    before = tree.node_sums.copy()
    update_class(tree, 7, classes[7])
    assert np.max(np.abs(tree.node_sums - before)) < 1e-12


def test_single_update_matches_rebuild():
    rng = np.random.default_rng(8)
    classes = random_unit_vectors(rng, 64, 8)
    tree = SamplerTree(classes, build_rff(8, 32, nu=4.0, seed=6))
    classes[17] = random_unit_vectors(rng, 1, 8)[0]
    tree.update_class(17, classes[17])
    assert _rebuild_gap(tree, classes) < 1e-9


def test_update_index_out_of_range():
    tree = SamplerTree(np.eye(4), LinearMap(4))
    with pytest.raises(IndexError):
        tree.update_class(4, np.ones(4))
    with pytest.raises(IndexError):
        tree.update_classes([0, 9], np.ones((2, 4)))


def test_batch_update_requires_distinct_indices():
    tree = SamplerTree(np.eye(4), LinearMap(4))
    with pytest.raises(ValueError):
        tree.update_classes([1, 1], np.ones((2, 4)))


def test_batch_update_matches_sequential():
    rng = np.random.default_rng(9)
    classes = random_unit_vectors(rng, 30, 4)
    fmap = build_rff(4, 8, nu=2.0, seed=7)
    a = SamplerTree(classes, fmap)
    b = SamplerTree(classes, fmap)
    idx = np.array([3, 11, 29, 0])
    new = random_unit_vectors(rng, 4, 4)
    a.update_classes(idx, new)
    for i, c in zip(idx, new):
        b.update_class(int(i), c)
    np.testing.assert_allclose(a.node_sums, b.node_sums, atol=1e-13)


@pytest.mark.slow
def test_many_updates_drift_below_tolerance():
    rng = np.random.default_rng(10)
    n, d = 256, 8
    classes = random_unit_vectors(rng, n, d)
    tree = SamplerTree(classes, build_rff(d, 32, nu=4.0, seed=8), refresh_every=None)
    for _ in range(10_000):
        i = int(rng.integers(n))
        classes[i] = random_unit_vectors(rng, 1, d)[0]
        tree.update_class(i, classes[i])
    assert _rebuild_gap(tree, classes) < 1e-6


def test_periodic_refresh_resets_counter():
    rng = np.random.default_rng(11)
    classes = random_unit_vectors(rng, 8, 3)
    tree = SamplerTree(classes, build_rff(3, 4, nu=1.0, seed=0), refresh_every=5)
    for k in range(5):
        tree.update_class(k, classes[k])
    assert tree.updates_since_refresh == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 19), st.integers(0, 2**31)), max_size=40))
def test_interleaved_updates_and_samples_match_rebuild(ops):
    rng = np.random.default_rng(12)
    classes = random_unit_vectors(rng, 20, 4)
    fmap = build_rff(4, 8, nu=2.0, seed=9)
    tree = SamplerTree(classes, fmap, eps=1e-4)
    for is_update, i, seed in ops:
        r = np.random.default_rng(seed)
        if is_update:
            classes[i] = random_unit_vectors(r, 1, 4)[0]
            tree.update_class(i, classes[i])
        else:
            query = tree.query_features(random_unit_vectors(r, 1, 4)[0])
            sample_class(tree, query, r)
    assert _rebuild_gap(tree, classes) < 1e-6
