import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings

from eigenformer.graph import (
    DisconnectedGraphError,
    DuplicateEdgeError,
    FeatureLengthError,
    IndexRangeError,
    SelfLoopError,
    Target,
    adjacency_matrix,
    build_graph,
    connected_components,
    degree_vector,
    diameter,
    inverse_permutation,
    is_connected,
    permute,
)

from conftest import complete_graph, connected_graphs, path_graph, random_connected


class TestBuildGraph:
    def test_single_edge(self):
        g = build_graph(2, [(0, 1)])
        assert g.num_nodes == 2 and g.num_edges == 1

    def test_self_loop_rejected(self):
        with pytest.raises(SelfLoopError):
            build_graph(3, [(0, 1), (1, 1)])

    def test_duplicate_unordered_pair_rejected(self):
        with pytest.raises(DuplicateEdgeError):
            build_graph(3, [(0, 1), (1, 0)])

    def test_index_out_of_range(self):
        with pytest.raises(IndexRangeError):
            build_graph(3, [(0, 3)])

    def test_edges_canonicalised_with_features_aligned(self):
        g = build_graph(3, [(2, 1), (1, 0)], edge_features=[[5.0], [7.0]])
        np.testing.assert_array_equal(g.edges, [[0, 1], [1, 2]])
        np.testing.assert_array_equal(g.edge_features, [[7.0], [5.0]])

    def test_feature_length_checked(self):
        with pytest.raises(FeatureLengthError):
            build_graph(3, [(0, 1)], node_features=[0, 1])
        with pytest.raises(FeatureLengthError):
            build_graph(3, [(0, 1)], edge_features=[[1.0], [2.0]])

    def test_node_class_target_length_checked(self):
        with pytest.raises(FeatureLengthError):
            build_graph(3, [(0, 1), (1, 2)], target=Target("node-classes", np.array([0, 1])))

    def test_default_features_are_zero_codes(self):
        g = path_graph(3)
        np.testing.assert_array_equal(g.node_features, [0, 0, 0])

    def test_immutable(self):
        g = path_graph(3)
        with pytest.raises(ValueError):
            g.edges[0, 0] = 2

    def test_target_inference(self):
        assert Target.infer(1.5, 3).kind == "graph-scalar"
        assert Target.infer([0, 1, 1], 3).kind == "node-classes"
        assert Target.infer([0.5, 1.0], 3).kind == "graph-vector"


class TestDegreesAndComponents:
    def test_path_degrees(self):
        np.testing.assert_array_equal(degree_vector(path_graph(3)), [1, 2, 1])

    def test_single_node_degree(self):
        np.testing.assert_array_equal(degree_vector(build_graph(1, [])), [0])

    def test_k4_degrees(self):
        np.testing.assert_array_equal(degree_vector(complete_graph(4)), [3, 3, 3, 3])

    def test_components(self):
        np.testing.assert_array_equal(connected_components(path_graph(3)), [0, 0, 0])
        np.testing.assert_array_equal(connected_components(build_graph(4, [(0, 1)])), [0, 0, 1, 2])
        assert connected_components(build_graph(0, [])).size == 0

    @given(connected_graphs())
    @settings(max_examples=50, deadline=None)
    def test_handshake(self, g):
        assert degree_vector(g).sum() == 2 * g.num_edges


class TestDiameter:
    def test_path_and_complete(self):
        assert diameter(path_graph(3)) == 2
        assert diameter(complete_graph(4)) == 1

    def test_disconnected_raises(self):
        with pytest.raises(DisconnectedGraphError):
            diameter(build_graph(4, [(0, 1)]))

    def test_path_attains_upper_bound(self):
        for n in range(1, 9):
            assert diameter(path_graph(n)) == n - 1

    def test_matches_networkx(self, rng):
        for _ in range(30):
            g = random_connected(rng, int(rng.integers(2, 15)))
            ref = nx.Graph()
            ref.add_nodes_from(range(g.num_nodes))
            ref.add_edges_from(g.edges.tolist())
            assert diameter(g) == nx.diameter(ref)
            assert diameter(g) <= g.num_nodes - 1
            assert is_connected(g)


class TestPermute:
    def test_reverse_path(self):
        g = path_graph(3)
        h = permute(g, np.array([2, 1, 0]))
        assert sorted(degree_vector(h)) == sorted(degree_vector(g))

    def test_identity(self):
        g = path_graph(4, node_features=[0, 1, 2, 3])
        assert permute(g, np.arange(4)).same_as(g)

    def test_complete_graph_edge_set_fixed(self, rng):
        g = complete_graph(4)
        assert permute(g, rng.permutation(4)).edge_set() == g.edge_set()

    def test_adjacency_conjugated(self, rng):
        g = random_connected(rng, 7, node_features=rng.integers(0, 5, 7))
        p = rng.permutation(7)
        h = permute(g, p)
        a, b = adjacency_matrix(g), adjacency_matrix(h)
        np.testing.assert_array_equal(b[np.ix_(p, p)], a)
        np.testing.assert_array_equal(h.node_features[p], g.node_features)

    @given(connected_graphs())
    @settings(max_examples=50, deadline=None)
    def test_inverse_round_trip(self, g):
        p = np.random.default_rng(g.num_nodes).permutation(g.num_nodes)
        assert permute(permute(g, p), inverse_permutation(p)).same_as(g)
