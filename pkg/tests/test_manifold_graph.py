import numpy as np
import pytest

from rtfgraph.errors import ShapeError
from rtfgraph.manifold_graph import (SELF_ID, FeatureBank, attach_query, build_knn_graph, leave_one_out,
                                     self_attachment)


def random_bank(rng, n=30, mics=3, d=8):
    return FeatureBank(rng.standard_normal((n, mics, d)), np.arange(100, 100 + n))


def brute_force_ids(bank, mic, point, k, skip=None):
    pairs = sorted(
        (float(np.linalg.norm(bank.features[row, mic] - point)), int(bank.ids[row]))
        for row in range(bank.size) if row != skip
    )
    return [pid for _, pid in pairs[:k]]


@pytest.mark.parametrize("seed", range(100))
def test_graph_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    bank = random_bank(rng, n=int(rng.integers(6, 25)), mics=2, d=4)
    k = int(rng.integers(1, 5))
    graph = build_knn_graph(bank, k)
    ids = graph.neighbor_ids(bank)
    assert graph.neighbors.shape == (2, bank.size, k)
    for mic in range(2):
        for row in range(bank.size):
            assert list(ids[mic, row]) == brute_force_ids(bank, mic, bank.features[row, mic], k, skip=row)
            assert np.all(np.diff(graph.distances[mic, row]) >= 0)


def test_graph_is_permutation_invariant(rng):
    bank = random_bank(rng)
    perm = rng.permutation(bank.size)
    shuffled = FeatureBank(bank.features[perm], bank.ids[perm])
    graph = build_knn_graph(bank, 4)
    other = build_knn_graph(shuffled, 4)
    inverse = np.argsort(perm)
    np.testing.assert_array_equal(other.neighbor_ids(shuffled)[:, inverse], graph.neighbor_ids(bank))


def test_ties_go_to_smaller_id():
    features = np.zeros((4, 1, 2))
    features[1:, 0, 0] = 1.0
    bank = FeatureBank(features, np.array([7, 3, 9, 5]))
    graph = build_knn_graph(bank, 2)
    assert list(graph.neighbor_ids(bank)[0, 0]) == [3, 5]


def test_graph_k_bounds(rng):
    bank = random_bank(rng, n=5)
    with pytest.raises(ValueError):
        build_knn_graph(bank, 5)
    with pytest.raises(ValueError):
        build_knn_graph(bank, 0)


def test_bank_validation(rng):
    with pytest.raises(ValueError):
        FeatureBank(rng.standard_normal((3, 2, 4)), np.array([1, 1, 2]))
    with pytest.raises(ShapeError):
        FeatureBank(rng.standard_normal((3, 4)), np.arange(3))
    features = rng.standard_normal((3, 2, 4))
    features[1, 0, 0] = np.nan
    with pytest.raises(ValueError):
        FeatureBank(features, np.arange(3))


def test_query_attachment_matches_exhaustive_search(rng):
    bank = random_bank(rng)
    graph = build_knn_graph(bank, 5)
    query = rng.standard_normal((3, 8))
    attached = attach_query(graph, bank, query, 5)
    assert attached.neighbor_features.shape == (3, 5, 8)
    for mic in range(3):
        assert list(attached.neighbor_ids[mic]) == brute_force_ids(bank, mic, query[mic], 5)
        rows = [bank.row_of(pid) for pid in attached.neighbor_ids[mic]]
        np.testing.assert_array_equal(attached.neighbor_features[mic], bank.features[rows, mic])
    np.testing.assert_array_equal(build_knn_graph(bank, 5).neighbors, graph.neighbors)


def test_leave_one_out_excludes_own_clean_node(rng):
    bank = random_bank(rng)
    target = int(bank.ids[4])
    noisy = bank.features[4] + 1e-3 * rng.standard_normal((3, 8))
    attached = leave_one_out(bank, target, noisy, 3)
    assert target not in attached.neighbor_ids
    np.testing.assert_array_equal(attached.center, noisy)
    with pytest.raises(KeyError):
        leave_one_out(bank, 9999, noisy, 3)


def test_query_shape_and_k_checks(rng):
    bank = random_bank(rng, n=4)
    with pytest.raises(ShapeError):
        attach_query(None, bank, np.zeros((2, 8)), 2)
    with pytest.raises(ValueError):
        attach_query(None, bank, np.zeros((3, 8)), 4, exclude_row=0)


def test_query_must_match_the_graph(rng):
    bank = random_bank(rng, n=10)
    query = rng.standard_normal((3, 8))
    graph = build_knn_graph(bank, 3)
    with pytest.raises(ValueError, match="graph K=3"):
        attach_query(graph, bank, query, 4)
    smaller = FeatureBank(bank.features[:6], bank.ids[:6])
    with pytest.raises(ShapeError):
        attach_query(graph, smaller, query, 3)


def test_self_attachment_has_single_self_edge(rng):
    query = rng.standard_normal((3, 8))
    attached = self_attachment(query)
    assert attached.neighbor_ids.shape == (3, 1)
    assert np.all(attached.neighbor_ids == SELF_ID)
    np.testing.assert_array_equal(attached.neighbor_features[:, 0], query)
    np.testing.assert_array_equal(attached.distances, 0.0)
