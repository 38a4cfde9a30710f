import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dstf.graph import (
    connected_subgraph,
    connectivity_adjacency,
    gaussian_kernel_adjacency,
    read_distance_list,
    row_normalize,
    transition_matrices,
)


def test_zero_cost_gives_unit_weight():
    adj = gaussian_kernel_adjacency([(0, 1, 0.0), (1, 0, 3.0)], 2, kappa=0.0)
    assert adj[0, 1] == 1.0


def test_three_node_kernel_matches_scalar_oracle():
    costs = [1.0, 2.0, 4.0]
    mean = sum(costs) / 3
    sigma = math.sqrt(sum((c - mean) ** 2 for c in costs) / 3)
    triples = [(0, 1, 1.0), (1, 2, 2.0), (2, 0, 4.0)]
    adj = gaussian_kernel_adjacency(triples, 3, kappa=0.0)
    for i, j, c in triples:
        assert adj[i, j] == pytest.approx(math.exp(-(c * c) / (sigma * sigma)), rel=1e-12)
    assert adj[1, 0] == 0.0 and adj[0, 0] == 0.0


def test_threshold_drops_small_weights():
    # sigma of {0, 10} is 5: exp(-4) ~ 0.018 < 0.1
    adj = gaussian_kernel_adjacency([(0, 1, 0.0), (1, 0, 10.0)], 2, kappa=0.1)
    assert adj[1, 0] == 0.0 and adj[0, 1] == 1.0


def test_threshold_idempotent(rng):
    triples = [(i, j, rng.uniform(0, 5)) for i in range(5) for j in range(5) if i != j]
    adj = gaussian_kernel_adjacency(triples, 5, kappa=0.3)
    again = np.where(adj < 0.3, 0.0, adj)
    np.testing.assert_array_equal(adj, again)


def test_symmetric_list_gives_symmetric_kernel(rng):
    triples = []
    for i in range(4):
        for j in range(i + 1, 4):
            c = rng.uniform(0, 3)
            triples += [(i, j, c), (j, i, c)]
    adj = gaussian_kernel_adjacency(triples, 4)
    np.testing.assert_array_equal(adj, adj.T)


def test_equal_costs_rejected():
    with pytest.raises(ValueError, match="costs are equal"):
        gaussian_kernel_adjacency([(0, 1, 2.0), (1, 0, 2.0)], 2)


def test_out_of_range_ids():
    with pytest.raises(ValueError):
        connectivity_adjacency([(0, 5)], 2)
    with pytest.raises(ValueError):
        gaussian_kernel_adjacency([(0, 3, 1.0), (1, 0, 2.0)], 2)


def test_connectivity_cases():
    np.testing.assert_array_equal(connectivity_adjacency([], 3), np.zeros((3, 3)))
    np.testing.assert_array_equal(connectivity_adjacency([(0, 1)], 2), [[0, 1], [0, 0]])


def test_distance_list_maps_sensor_ids(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("from,to,cost\n773869,767541,120.5\n767541,773869,80\n999,773869,1\n773869,773869,inf\n")
    frame = read_distance_list(path, ["767541", "773869"])
    assert sorted(zip(frame["from"], frame["to"])) == [(0, 1), (1, 0)]


def test_transition_examples():
    a = np.array([[0, 1], [1, 0]], float)
    np.testing.assert_array_equal(transition_matrices(a).forward, a)
    a = np.array([[0, 2, 2], [0, 0, 1], [0, 0, 0]], float)
    t = transition_matrices(a)
    np.testing.assert_allclose(t.forward, [[0, 0.5, 0.5], [0, 0, 1], [0, 0, 0]])
    # transpose is [[0,0,0],[2,0,0],[2,1,0]]
    np.testing.assert_allclose(t.backward, [[0, 0, 0], [1, 0, 0], [2 / 3, 1 / 3, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_row_stochastic_and_support(n, seed):
    g = np.random.default_rng(seed)
    a = g.uniform(size=(n, n)) * (g.uniform(size=(n, n)) < 0.4)
    t = transition_matrices(a)
    for p, base in ((t.forward, a), (t.backward, a.T)):
        deg = base.sum(1)
        np.testing.assert_allclose(p[deg > 0].sum(1), 1.0, atol=1e-6)
        assert (p[deg == 0] == 0).all()
        np.testing.assert_array_equal(p > 0, base > 0)
        assert np.isfinite(p).all()


def test_row_normalize_zero_rows():
    np.testing.assert_array_equal(row_normalize(np.zeros((2, 2))), np.zeros((2, 2)))


def test_connected_subgraph():
    a = np.zeros((6, 6))
    for i, j in [(0, 1), (1, 2), (2, 3), (4, 5)]:
        a[i, j] = 1
    nodes = connected_subgraph(a, 3, seed_node=2)
    assert set(nodes) <= {0, 1, 2, 3} and 2 in nodes and len(nodes) == 3
    with pytest.raises(ValueError):
        connected_subgraph(a, 3, seed_node=4)
