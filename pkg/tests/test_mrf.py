import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vpp.graph import Graph, build_grid, build_random_graph
from vpp.mrf import (CapacityError, JointTable, PairwiseMRF, brute_force_joint, exact_marginals,
                     independent_mrf, kl_product_vs_joint, product_table, random_mrf, sample_joint,
                     softmax_rows)

LOG2 = math.log(2.0)


def attractive_pair(strength=LOG2):
    return PairwiseMRF(Graph.from_edges(2, [(0, 1)]), 2, np.zeros((2, 2)),
                       {(0, 1): strength * np.eye(2)})


def enumerate_joint(mrf):
    """Plain-Python enumeration, independent of the vectorised table builder."""
    weights = {}
    for a in itertools.product(range(mrf.n_actions), repeat=mrf.n_agents):
        s = sum(mrf.node_potentials[i][a[i]] for i in range(mrf.n_agents))
        s += sum(t[a[i], a[j]] for (i, j), t in mrf.edge_potentials.items())
        weights[a] = math.exp(s)
    z = sum(weights.values())
    return {a: w / z for a, w in weights.items()}, math.log(z)


@st.composite
def mrfs(draw, max_agents=4, max_actions=3):
    n = draw(st.integers(1, max_agents))
    A = draw(st.integers(2, max_actions))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    return random_mrf(build_random_graph(n, 0.6, rng), A, rng)


def test_single_agent_zero_potential():
    J = brute_force_joint(independent_mrf([[0.0, 0.0]]))
    np.testing.assert_allclose(J.probabilities, [0.5, 0.5], atol=1e-15)
    assert J.log_partition == pytest.approx(LOG2, abs=1e-15)


def test_all_zero_three_agents_uniform():
    J = brute_force_joint(independent_mrf(np.zeros((3, 2))))
    np.testing.assert_allclose(J.probabilities, np.full((2, 2, 2), 0.125), atol=1e-15)


def test_attractive_pair_joint():
    J = brute_force_joint(attractive_pair())
    np.testing.assert_allclose(J.probabilities, np.array([[2, 1], [1, 2]]) / 6, atol=1e-15)
    np.testing.assert_allclose(exact_marginals(J), np.full((2, 2), 0.5), atol=1e-15)


def test_deterministic_joint_marginals_one_hot():
    P = np.zeros((3, 3))
    P[2, 0] = 1.0
    np.testing.assert_array_equal(exact_marginals(JointTable(P, 0.0)), [[0, 0, 1], [1, 0, 0]])


def test_uniform_product_kl_against_attractive_pair():
    # sum_a 1/4 (log 1/4 - log pi(a)) with pi = (2,1,1,2)/6
    expected = 0.5 * math.log(9 / 8)
    assert kl_product_vs_joint(np.full((2, 2), 0.5), brute_force_joint(attractive_pair())) == \
        pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.058891517828191, abs=1e-14)


def test_kl_infinite_off_support():
    P = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert kl_product_vs_joint(np.full((2, 2), 0.5), JointTable(P, 0.0)) == math.inf


def test_capacity_error():
    with pytest.raises(CapacityError):
        brute_force_joint(independent_mrf(np.zeros((25, 2))))
    with pytest.raises(CapacityError):
        brute_force_joint(independent_mrf(np.zeros((3, 2))), cap=7)


def test_potential_validation():
    g = Graph.from_edges(2, [(0, 1)])
    with pytest.raises(ValueError):
        PairwiseMRF(g, 2, np.zeros((2, 2)), {})
    with pytest.raises(ValueError):
        PairwiseMRF(g, 2, np.array([[0.0, np.inf], [0, 0]]), {(0, 1): np.zeros((2, 2))})


def test_reversed_edge_key_is_transposed():
    t = np.array([[0.0, 1.0], [2.0, 3.0]])
    m = PairwiseMRF(Graph.from_edges(2, [(0, 1)]), 2, np.zeros((2, 2)), {(1, 0): t})
    np.testing.assert_array_equal(m.edge_potentials[(0, 1)], t.T)
    np.testing.assert_array_equal(m.pair(1, 0), t)


def test_json_roundtrip(rng):
    m = random_mrf(build_grid(2, 2), 3, rng)
    back = PairwiseMRF.from_json(m.to_json())
    np.testing.assert_array_equal(back.node_potentials, m.node_potentials)
    for e in m.graph.edges:
        np.testing.assert_array_equal(back.edge_potentials[e], m.edge_potentials[e])


def test_sampling():
    P = np.zeros((2, 2, 2))
    P[1, 0, 1] = 1.0
    J = JointTable(P, 0.0)
    assert {sample_joint(J, s) for s in range(20)} == {(1, 0, 1)}
    U = brute_force_joint(independent_mrf(np.zeros((3, 2))))
    draws = sample_joint(U, 2024, size=80_000)
    freq = np.bincount(np.ravel_multi_index(draws.T, (2, 2, 2)), minlength=8) / 80_000
    assert np.max(np.abs(freq - 0.125)) < 0.01
    assert sample_joint(U, 99) == sample_joint(U, 99)


@given(mrfs())
def test_brute_force_matches_plain_enumeration(mrf):
    probs, log_z = enumerate_joint(mrf)
    J = brute_force_joint(mrf)
    assert J.log_partition == pytest.approx(log_z, abs=1e-12)
    for a, p in probs.items():
        assert J.probabilities[a] == pytest.approx(p, abs=1e-12)
    assert abs(J.probabilities.sum() - 1.0) <= 1e-12


@given(st.integers(1, 4), st.integers(2, 4), st.integers(0, 2 ** 31))
def test_independent_marginals_are_softmax(n, A, seed):
    psi = np.random.default_rng(seed).uniform(-3, 3, (n, A))
    J = brute_force_joint(independent_mrf(psi))
    np.testing.assert_allclose(exact_marginals(J), softmax_rows(psi), atol=1e-12, rtol=0)
    assert abs(kl_product_vs_joint(exact_marginals(J), J)) <= 1e-12


@given(mrfs(), st.floats(-10, 10), st.data())
def test_row_shift_invariance(mrf, c, data):
    i = data.draw(st.integers(0, mrf.n_agents - 1))
    node = mrf.node_potentials.copy()
    node[i] += c
    shifted = PairwiseMRF(mrf.graph, mrf.n_actions, node, mrf.edge_potentials)
    a, b = brute_force_joint(mrf), brute_force_joint(shifted)
    np.testing.assert_allclose(a.probabilities, b.probabilities, atol=1e-12, rtol=0)
    assert b.log_partition - a.log_partition == pytest.approx(c, abs=1e-10)


@given(mrfs(), st.integers(0, 2 ** 31))
def test_kl_gibbs_inequality(mrf, seed):
    J = brute_force_joint(mrf)
    q = np.random.default_rng(seed).dirichlet(np.ones(mrf.n_actions), size=mrf.n_agents)
    assert kl_product_vs_joint(q, J) >= -1e-12
    assert product_table(q).sum() == pytest.approx(1.0, abs=1e-12)
