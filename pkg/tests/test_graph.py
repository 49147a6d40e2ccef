import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vpp.graph import (Graph, build_complete, build_grid, build_knn, build_random,
                       build_random_graph, build_random_tree, knn_choices, refresh_schedule)


def assert_well_formed(g: Graph):
    A = g.adjacency()
    assert A.dtype == bool
    assert np.array_equal(A, A.T)
    assert not A.diagonal().any()
    assert len(set(g.edges)) == len(g.edges)
    for i in range(g.n_agents):
        assert set(g.neighbors(i)) == set(np.flatnonzero(A[i]))


def test_grid_3x3_counts():
    g = build_grid(3, 3)
    assert g.n_agents == 9
    assert len(g.edges) == 12


def test_grid_degenerate_and_line():
    assert build_grid(1, 1).edges == ()
    assert build_grid(1, 1).n_agents == 1
    assert list(build_grid(1, 4).edges) == [(0, 1), (1, 2), (2, 3)]


def test_grid_vertex_ids_row_major():
    g = build_grid(2, 3)
    assert (1, 4) in g.edges and (0, 3) in g.edges
    assert (2, 3) not in g.edges


@pytest.mark.parametrize("rows, cols", [(0, 3), (2, 0)])
def test_grid_rejects_zero(rows, cols):
    with pytest.raises(ValueError):
        build_grid(rows, cols)


@given(st.integers(1, 7), st.integers(1, 7))
def test_grid_edge_formula_and_degrees(r, c):
    g = build_grid(r, c)
    assert len(g.edges) == r * (c - 1) + c * (r - 1)
    assert_well_formed(g)
    if r >= 2 and c >= 2:
        assert {g.degree(i) for i in range(g.n_agents)} <= {2, 3, 4}


def test_knn_collinear():
    g = build_knn(np.array([[0.0], [1.0], [3.0]]), 1)
    assert list(g.edges) == [(0, 1), (1, 2)]


def test_knn_full_k_is_complete(rng):
    pts = rng.normal(size=(6, 2))
    assert build_knn(pts, 5).edges == build_complete(6).edges


def brute_knn_edges(pts, k):
    n = len(pts)
    edges = set()
    for i in range(n):
        order = sorted((j for j in range(n) if j != i),
                       key=lambda j: (float(np.sum((pts[i] - pts[j]) ** 2)), j))
        for j in order[:k]:
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def test_knn_matches_sort_oracle(rng):
    for _ in range(20):
        pts = rng.random((5, 2))
        assert list(build_knn(pts, 2).edges) == brute_knn_edges(pts, 2)


def test_knn_ties_prefer_lower_id():
    # vertex 1 is equidistant from 0 and 2
    assert knn_choices(np.array([[0.0], [1.0], [2.0]]), 1)[1] == [0]


@pytest.mark.parametrize("k", [0, 4])
def test_knn_bad_k(k):
    with pytest.raises(ValueError):
        build_knn(np.zeros((4, 2)) + np.arange(4)[:, None], k)


def test_knn_rejects_nonfinite():
    with pytest.raises(ValueError):
        build_knn(np.array([[0.0], [np.nan], [1.0]]), 1)


@given(st.integers(3, 9), st.integers(0, 2 ** 31), st.data())
def test_knn_permutation_consistent(n, seed, data):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    k = data.draw(st.integers(1, n - 1))
    perm = rng.permutation(n)
    moved = np.empty_like(pts)
    moved[perm] = pts
    g = build_knn(pts, k)
    assert_well_formed(g)
    assert g.relabel(perm).edges == build_knn(moved, k).edges


def test_random_graph_contracts():
    assert build_random(4, 3, seed=123).edges == build_complete(4).edges
    assert build_random(10, 2, 5).edges == build_random(10, 2, 5).edges
    g = build_random(9, 3, 7)
    assert min(g.degree(i) for i in range(9)) >= 3
    with pytest.raises(ValueError):
        build_random(4, 4, 0)


@pytest.mark.parametrize("step, interval, expected", [(0, 5, True), (7, 5, False), (10, 5, True)])
def test_refresh_schedule(step, interval, expected):
    assert refresh_schedule(step, interval) is expected


def test_refresh_rejects_zero_interval():
    with pytest.raises(ValueError):
        refresh_schedule(3, 0)


def test_json_roundtrip_sorted():
    g = Graph.from_edges(4, [(3, 1), (0, 2), (1, 0)])
    obj = json.loads(g.to_json())
    assert obj == {"n": 4, "edges": [[0, 1], [0, 2], [1, 3]]}
    assert Graph.from_json(g.to_json()) == g


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        Graph.from_edges(3, [(1, 1)])
    with pytest.raises(ValueError):
        Graph.from_edges(3, [(0, 3)])


@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_random_tree_and_distances(n, seed):
    g = build_random_tree(n, np.random.default_rng(seed))
    assert_well_formed(g)
    assert g.is_tree()
    d = g.distances(0)
    for i, j in itertools.product(range(n), repeat=2):
        if j in g.neighbors(i):
            assert abs(d[i] - d[j]) == 1


def test_erdos_renyi_extremes(rng):
    assert build_random_graph(5, 0.0, rng).edges == ()
    assert build_random_graph(5, 1.0, rng).edges == build_complete(5).edges
