import itertools

import numpy as np
import pytest

from ssocl.errors import MappingError
from ssocl.mapping import (assign_pseudo_labels, cosine_distance_matrix, greedy_match, hungarian, match_clusters,
                           match_partial, merge_with_memory, ClusterMapping)


def brute_force(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(cost.shape[1]), n))


def test_distance_examples():
    c = np.array([[1.0, 0.0], [0.0, 2.0]])
    d = cosine_distance_matrix(c, c)
    assert np.allclose(np.diag(d), 0.0)
    assert d[0, 1] == pytest.approx(1.0)
    assert cosine_distance_matrix(c[:1], -c[:1])[0, 0] == pytest.approx(2.0)


def test_empty_centroids_are_infinite():
    c = np.eye(3)
    d = cosine_distance_matrix(c, c, present_t=[True, False, True], present_m=[True, True, False])
    assert np.all(np.isinf(d[1])) and np.all(np.isinf(d[:, 2]))


def test_zero_norm_centroid_rejected():
    with pytest.raises(MappingError):
        cosine_distance_matrix(np.zeros((2, 2)), np.eye(2))


def test_identity_dominant():
    m = match_clusters(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert m.assignment == {0: 0, 1: 1} and m.cost == 0.0


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_permuted_centroids_recover_inverse(k):
    rng = np.random.default_rng(k)
    cm = rng.normal(size=(k, 6))
    perm = rng.permutation(k)
    m = match_clusters(cosine_distance_matrix(cm[perm], cm))
    assert [m.assignment[i] for i in range(k)] == perm.tolist()


def test_random_4x4_and_5x5_match_brute_force():
    rng = np.random.default_rng(0)
    for n, count in ((4, 300), (5, 60)):
        for _ in range(count):
            cost = rng.uniform(0, 2, size=(n, n))
            assert match_clusters(cost).cost == pytest.approx(brute_force(cost), abs=1e-12)


def test_hungarian_rectangular_and_integer_ties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        cost = rng.integers(0, 3, size=(3, 5)).astype(float)
        cols = hungarian(cost)
        assert len(set(cols.tolist())) == 3
        assert cost[np.arange(3), cols].sum() == brute_force(cost)


def test_forbidden_pairs():
    d = np.array([[np.inf, 0.5], [0.1, np.inf]])
    assert match_clusters(d).assignment == {0: 1, 1: 0}
    with pytest.raises(MappingError):
        match_clusters(np.array([[np.inf, np.inf], [0.0, 1.0]]))
    with pytest.raises(MappingError):
        match_clusters(np.array([[0.0, np.inf], [0.0, np.inf]]))


def test_subset_rows():
    d = np.array([[0.9, 0.1, 0.5], [np.inf] * 3, [0.2, 0.8, 0.3]])
    m = match_clusters(d, rows=[0, 2])
    assert m.assignment == {0: 1, 2: 0} and m.cost == pytest.approx(0.3)


def test_partial_more_rows_than_columns():
    d = np.array([[0.1, 0.9], [0.8, 0.2], [0.5, 0.5], [0.05, 0.7]])
    m = match_partial(d, rows=[0, 1, 2, 3], cols=[0, 1])
    assert m.assignment == {1: 1, 3: 0}


def test_greedy_can_be_suboptimal():
    cost = np.array([[0.0, 1.0], [0.1, 10.0]])
    g = greedy_match(cost)
    assert cost[[0, 1], g].sum() > match_clusters(cost).cost


def test_pseudo_labels():
    clusters = np.array([0, 0, 1])
    assert assign_pseudo_labels(clusters, ClusterMapping({0: 3, 1: 0}, 0.0)).tolist() == [3, 3, 0]
    assert assign_pseudo_labels(clusters, ClusterMapping({0: 0, 1: 1}, 0.0)).tolist() == [0, 0, 1]
    assert assign_pseudo_labels(np.zeros(4, int), ClusterMapping({0: 2}, 0.0)).tolist() == [2] * 4
    with pytest.raises(MappingError):
        assign_pseudo_labels(clusters, ClusterMapping({0: 1}, 0.0))


def test_merge():
    bx, by = np.zeros((32, 2, 3)), np.zeros(32, int)
    mx, my = np.ones((200, 2, 3)), np.full(200, 2)
    x, y = merge_with_memory(bx, by, mx, my)
    assert len(x) == 232 and np.all(x[:32] == 0) and set(y.tolist()) == {0, 2}
    x, y = merge_with_memory(bx, by, np.zeros((0,)), np.zeros(0))
    assert len(x) == 32
