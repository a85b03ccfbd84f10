import numpy as np
import pytest

from distpoison.graph import (
    GraphError,
    build_graph,
    count_cross_edges,
    generate_sbm,
    normalize_adjacency,
    partition_nodes,
    sample_1hop,
)


def make_graph(num_nodes, edges, feature_dim=2):
    feats = np.zeros((num_nodes, feature_dim))
    labels = np.zeros(num_nodes, dtype=np.int64)
    return build_graph(edges, feats, labels)


def dense_adjacency(g):
    a = np.zeros((g.num_nodes, g.num_nodes))
    for i, j in g.edge_array():
        a[i, j] = a[j, i] = 1.0
    return a


def dense_normalized(g):
    # Independent dense construction of the self-looped normalization.
    a = dense_adjacency(g) + np.eye(g.num_nodes)
    d = a.sum(axis=1)
    dinv = np.diag(1.0 / np.sqrt(d))
    return dinv @ a @ dinv


class TestBuildGraph:
    def test_symmetrization(self):
        g = make_graph(2, [(0, 1)])
        assert list(g.neighbors(0)) == [1]
        assert list(g.neighbors(1)) == [0]
        assert g.num_edges == 1

    def test_dedup_and_self_loop_drop(self):
        with pytest.warns(UserWarning):
            g = make_graph(3, [(0, 1), (1, 0), (2, 2)])
        assert g.num_edges == 1
        assert g.dropped_self_loops == 1
        assert not g.has_edge(2, 2)

    def test_out_of_range_edge(self):
        with pytest.raises(GraphError):
            make_graph(3, [(0, 5)])

    def test_duplicate_split_node(self):
        feats = np.zeros((3, 2))
        labels = np.zeros(3, dtype=np.int64)
        with pytest.raises(GraphError):
            build_graph([(0, 1)], feats, labels, splits=([0], [0], []))

    def test_empty_node_set(self):
        with pytest.raises(GraphError):
            build_graph([], np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


class TestNormalizeAdjacency:
    def test_single_node(self):
        g = make_graph(1, [])
        adj = normalize_adjacency(g)
        np.testing.assert_allclose(adj.matrix.toarray(), [[1.0]])

    def test_two_nodes_one_edge(self):
        # Hand oracle: self-looped degrees (2, 2) so every entry is 0.5.
        g = make_graph(2, [(0, 1)])
        adj = normalize_adjacency(g)
        np.testing.assert_allclose(adj.matrix.toarray(), [[0.5, 0.5], [0.5, 0.5]])
        np.testing.assert_allclose(adj.degrees, [2.0, 2.0])

    def test_star_center_diagonal(self):
        g = make_graph(5, [(0, 1), (0, 2), (0, 3), (0, 4)])
        adj = normalize_adjacency(g)
        assert adj.matrix[0, 0] == pytest.approx(1.0 / 5.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(2, 33)
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
        g = make_graph(n, edges)
        adj = normalize_adjacency(g)
        ref = dense_normalized(g)
        np.testing.assert_allclose(adj.matrix.toarray(), ref, atol=1e-14)
        # support iff (i == j or edge present)
        got = adj.matrix.toarray() > 0
        want = (dense_adjacency(g) + np.eye(n)) > 0
        assert np.array_equal(got, want)


class TestPartition:
    def test_round_robin(self):
        g = make_graph(8, [(0, 1)])
        part = partition_nodes(g, 4, "round_robin")
        assert [sorted(part.share(w)) for w in range(4)] == [
            [0, 4],
            [1, 5],
            [2, 6],
            [3, 7],
        ]

    def test_single_worker(self):
        g = make_graph(5, [(0, 1)])
        part = partition_nodes(g, 1)
        assert np.all(part.assignment == 0)

    def test_path_cross_edges(self):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
        part = partition_nodes(g, 2, "round_robin")
        # Enumeration oracle: count endpoint-assignment mismatches directly.
        want = sum(
            1 for i, j in g.edge_array() if part.assignment[i] != part.assignment[j]
        )
        assert want == 3
        assert count_cross_edges(g, part) == 3

    @pytest.mark.parametrize("strategy", ["round_robin", "hash", "random"])
    @pytest.mark.parametrize("seed", range(5))
    def test_totality(self, strategy, seed):
        g = make_graph(17, [(0, 1)])
        part = partition_nodes(g, 3, strategy, seed=seed)
        counts = np.bincount(part.assignment, minlength=3)
        assert counts.sum() == 17

    def test_invalid_worker_count(self):
        g = make_graph(2, [(0, 1)])
        with pytest.raises(GraphError):
            partition_nodes(g, 0)


class TestSample1Hop:
    def test_isolated_target(self):
        g = make_graph(3, [(1, 2)])
        sub = sample_1hop(g, 0)
        assert list(sub.node_ids) == [0]
        assert len(sub.edges) == 0

    def test_star_center(self):
        g = make_graph(5, [(0, 1), (0, 2), (0, 3), (0, 4)])
        sub = sample_1hop(g, 0)
        assert sorted(sub.node_ids) == [0, 1, 2, 3, 4]

    def test_path_induced_edges(self):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
        sub = sample_1hop(g, 1)
        assert sorted(sub.node_ids) == [0, 1, 2]
        got = {sub.to_global(i, j) for i, j in sub.edges}
        assert got == {(0, 1), (1, 2)}  # 2-3 excluded, 0 and 2 not adjacent

    @pytest.mark.parametrize("seed", range(20))
    def test_node_set_equals_target_plus_neighbors(self, seed):
        g = generate_sbm(seed, [6, 6], 0.4, 0.1, feature_dim=2, noise=0.1)
        for t in range(g.num_nodes):
            sub = sample_1hop(g, t)
            assert set(sub.node_ids) == {t} | set(int(v) for v in g.neighbors(t))

    def test_reflects_edge_removal(self):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
        g.remove_edge(1, 2)
        sub = sample_1hop(g, 1)
        assert sorted(sub.node_ids) == [0, 1]

    def test_invalid_target(self):
        g = make_graph(2, [(0, 1)])
        with pytest.raises(GraphError):
            sample_1hop(g, 7)


class TestMutation:
    def test_remove_and_add(self):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
        g.remove_edge(0, 1)
        assert not g.has_edge(0, 1) and not g.has_edge(1, 0)
        assert g.num_edges == 2
        g.add_edge(0, 3)
        assert g.has_edge(3, 0)
        assert g.num_edges == 3

    def test_remove_missing_edge(self):
        g = make_graph(3, [(0, 1)])
        with pytest.raises(GraphError):
            g.remove_edge(0, 2)

    def test_add_existing_edge(self):
        g = make_graph(3, [(0, 1)])
        with pytest.raises(GraphError):
            g.add_edge(1, 0)

    def test_compaction_preserves_structure(self):
        rng = np.random.default_rng(0)
        edges = [(i, j) for i in range(20) for j in range(i + 1, 20) if rng.random() < 0.4]
        g = make_graph(20, edges)
        removed = [tuple(e) for e in g.edge_array()[::3]]
        for i, j in removed:
            g.remove_edge(i, j)
        before = {tuple(e) for e in g.edge_array()}
        g.compact()
        after = {tuple(e) for e in g.edge_array()}
        assert before == after
        assert not (before & set(removed))

    def test_copy_is_independent(self):
        g = make_graph(3, [(0, 1), (1, 2)])
        h = g.copy()
        h.remove_edge(0, 1)
        h.set_feature(0, 0, 9.0)
        assert g.has_edge(0, 1)
        assert g.features[0, 0] == 0.0


class TestGenerateSBM:
    def test_extreme_probabilities(self):
        g = generate_sbm(0, [3, 3], 1.0, 0.0, feature_dim=2, noise=0.0)
        cliques = {(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)}
        assert {tuple(e) for e in g.edge_array()} == cliques

    def test_zero_probabilities(self):
        g = generate_sbm(1, [4, 4], 0.0, 0.0, feature_dim=2, noise=0.1)
        assert g.num_edges == 0

    def test_determinism(self):
        g1 = generate_sbm(7, [10, 10], 0.3, 0.05, feature_dim=4, noise=0.2)
        g2 = generate_sbm(7, [10, 10], 0.3, 0.05, feature_dim=4, noise=0.2)
        assert np.array_equal(g1.edge_array(), g2.edge_array())
        assert np.array_equal(g1.features, g2.features)
        assert np.array_equal(g1.train_mask, g2.train_mask)

    def test_invalid_probability(self):
        with pytest.raises(GraphError):
            generate_sbm(0, [3], 1.5, 0.0, feature_dim=2, noise=0.0)

    def test_masks_disjoint_and_stratified(self):
        g = generate_sbm(3, [10, 10, 10], 0.3, 0.02, feature_dim=4, noise=0.2)
        overlap = (
            g.train_mask.astype(int) + g.val_mask.astype(int) + g.test_mask.astype(int)
        )
        assert overlap.max() <= 1
        for b in range(3):
            assert np.any(g.train_mask & (g.labels == b))
