import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_id.errors import DataError, DisconnectedGraphError
from manifold_id.features import FeatureMatrix, distance_matrix
from manifold_id.graph import (
    build_knn_graph,
    geodesic_distances,
    graph_from_edges,
    is_connected,
    neighbor_order,
)
from oracles import floyd_warshall, random_graph


def line(*xs):
    return FeatureMatrix(np.array(xs, dtype=float)[:, None])


def test_collinear_points_k1_union():
    g = build_knn_graph(line(0, 1, 2, 4), 1)
    np.testing.assert_array_equal(g.edges(), [[0, 1, 1], [1, 2, 1], [2, 3, 2]])
    assert is_connected(g) == (True, [4])
    s = geodesic_distances(g, n_sources="all")
    assert s.matrix[0, 3] == 4.0


def test_two_points():
    g = build_knn_graph(FeatureMatrix([[0, 0], [3, 4]]), 1)
    np.testing.assert_array_equal(g.edges(), [[0, 1, 5]])


def test_k_must_be_below_n():
    with pytest.raises(DataError):
        build_knn_graph(line(0, 1, 2), 3)


def test_ties_go_to_lower_index():
    # node 1 is equidistant from 0 and 2
    order = neighbor_order(line(0, 1, 2), 1)
    assert order.index[1, 0] == 0


def test_mutual_is_subset_of_union():
    rng = np.random.default_rng(3)
    m = FeatureMatrix(rng.standard_normal((60, 4)))
    u = {tuple(e[:2]) for e in build_knn_graph(m, 3).edges()}
    mu = {tuple(e[:2]) for e in build_knn_graph(m, 3, symmetrize="mutual").edges()}
    assert mu <= u


def test_graph_invariants():
    rng = np.random.default_rng(4)
    m = FeatureMatrix(rng.standard_normal((80, 5)))
    g = build_knn_graph(m, 4)
    mat = g.matrix.toarray()
    assert np.array_equal(mat, mat.T)
    assert np.all(np.diag(mat) == 0)
    assert np.all(mat[mat != 0] > 0)
    assert g.degrees().min() >= 4


def test_cosine_ranks_but_edges_use_arc_length():
    rng = np.random.default_rng(5)
    m = FeatureMatrix(rng.standard_normal((30, 3)))
    g = build_knn_graph(m, 3, metric="cosine")
    arc = distance_matrix(m.values(), metric="arc-length")
    for a, b, w in g.edges():
        assert w == pytest.approx(arc[int(a), int(b)], abs=1e-12)


def test_duplicate_points_warn_and_floor():
    m = FeatureMatrix([[0.0], [0.0], [1.0]])
    with pytest.warns(RuntimeWarning):
        g = build_knn_graph(m, 1)
    assert g.edges()[0, 2] == 1e-12


def test_disjoint_edges_disconnected():
    g = graph_from_edges(4, [(0, 1, 1.0), (2, 3, 1.0)])
    assert is_connected(g) == (False, [2, 2])
    with pytest.raises(DisconnectedGraphError) as err:
        geodesic_distances(g)
    assert err.value.component_sizes == [2, 2]


def test_path_graph():
    g = graph_from_edges(3, [(0, 1, 1.0), (1, 2, 1.0)])
    assert is_connected(g) == (True, [3])
    assert geodesic_distances(g, n_sources="all").matrix[0, 2] == 2.0


def test_square_cycle_diagonal():
    g = graph_from_edges(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)])
    assert geodesic_distances(g, n_sources="all").matrix[0, 2] == 2.0


def test_graph_from_edges_validation():
    with pytest.raises(DataError):
        graph_from_edges(2, [(0, 0, 1.0)])
    with pytest.raises(DataError):
        graph_from_edges(2, [(0, 1, 0.0)])


@pytest.mark.parametrize("seed", range(20))
def test_matches_floyd_warshall(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    edges = random_graph(rng, n)
    g = graph_from_edges(n, edges)
    s = geodesic_distances(g, n_sources="all")
    np.testing.assert_array_equal(s.matrix, floyd_warshall(n, edges))


def test_real_valued_weights_match_oracle_to_rounding():
    rng = np.random.default_rng(99)
    edges = random_graph(rng, 40, dyadic=False)
    s = geodesic_distances(graph_from_edges(40, edges), n_sources="all")
    np.testing.assert_allclose(s.matrix, floyd_warshall(40, edges), rtol=1e-12)


def test_neighbor_geodesic_equals_edge_weight_and_lower_bound():
    rng = np.random.default_rng(6)
    m = FeatureMatrix(rng.standard_normal((100, 3)))
    g = build_knn_graph(m, 5)
    s = geodesic_distances(g, n_sources="all")
    direct = distance_matrix(m.values())
    assert np.all(s.matrix >= direct - 1e-9)
    # an edge is a shortest path unless a detour is shorter, which the
    # triangle inequality rules out for metric weights
    for a, b, w in g.edges():
        assert s.matrix[int(a), int(b)] == pytest.approx(w, abs=1e-12)


def test_monotone_in_k():
    rng = np.random.default_rng(7)
    m = FeatureMatrix(rng.standard_normal((120, 3)))
    prev = None
    for k in (4, 6, 9, 15):
        r = geodesic_distances(build_knn_graph(m, k), n_sources="all").matrix
        if prev is not None:
            assert np.all(r <= prev + 1e-12)
        prev = r


def test_sampled_sources_deterministic_and_thread_independent():
    rng = np.random.default_rng(8)
    m = FeatureMatrix(rng.standard_normal((300, 3)))
    g = build_knn_graph(m, 6)
    a = geodesic_distances(g, n_sources=37, seed=11, threads=1)
    b = geodesic_distances(g, n_sources=37, seed=11, threads=4)
    c = geodesic_distances(g, n_sources=37, seed=12, threads=1)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != c.to_bytes()
    assert len(a) == 37 * 299
    assert 0 < a.coverage < 1


def test_complete_sample_pairs_and_dense():
    g = graph_from_edges(3, [(0, 1, 1.0), (1, 2, 2.0)])
    s = geodesic_distances(g, n_sources="all")
    i, j, r = s.pairs()
    np.testing.assert_array_equal(np.column_stack([i, j, r]), [[0, 1, 1], [0, 2, 3], [1, 2, 2]])
    assert s.coverage == 1.0
    np.testing.assert_array_equal(s.dense(), [[0, 1, 3], [1, 0, 2], [3, 2, 0]])


def test_pair_budget_chooses_source_count():
    g = graph_from_edges(5, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)])
    assert len(geodesic_distances(g, pair_budget=8).sources) == 2


def test_csv_exports(tmp_path):
    g = graph_from_edges(3, [(0, 1, 1.0), (1, 2, 2.0)])
    g.to_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines() == ["src,dst,weight", "0,1,1.0", "1,2,2.0"]
    geodesic_distances(g, n_sources="all").to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[2] == "0,2,3.0"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 25))
def test_geodesics_symmetric_and_zero_diagonal(seed, n):
    rng = np.random.default_rng(seed)
    g = graph_from_edges(n, random_graph(rng, n))
    r = geodesic_distances(g, n_sources="all").matrix
    assert np.array_equal(r, r.T)
    assert np.all(np.diag(r) == 0)
