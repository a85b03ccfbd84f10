import numpy as np
import pytest

from conftest import dense_normalized, make_graph, random_instance
from distpoison.gnn import (
    GradientBundle,
    NumericalError,
    ParamSet,
    attack_loss,
    backward,
    check_gradients,
    forward,
    gcn_forward,
    masked_ce_loss,
    sgc_forward,
    sgd_step,
)
from distpoison.graph import build_graph, generate_sbm, normalize_adjacency


def gcn_params(feature_dim, hidden, classes, seed=0, lr=0.1):
    return ParamSet.init_gcn(feature_dim, hidden, classes, seed=seed, learning_rate=lr)


def dense_gcn(adj_dense, X, W0, W1):
    return adj_dense @ np.maximum(adj_dense @ X @ W0, 0.0) @ W1


class TestGCNForward:
    def test_zero_weights(self):
        g = make_graph(4, [(0, 1), (1, 2)], feature_dim=3)
        adj = normalize_adjacency(g)
        params = ParamSet(W0=np.zeros((3, 5)), W1=np.zeros((5, 2)))
        Z = gcn_forward(params, adj, g.features)
        assert np.all(Z == 0.0)

    def test_identity_chain_single_node(self):
        g = make_graph(1, [], features=np.array([[1.0, 0.0]]))
        adj = normalize_adjacency(g)  # [[1.0]]
        params = ParamSet(W0=np.eye(2), W1=np.eye(2))
        Z = gcn_forward(params, adj, g.features)
        np.testing.assert_allclose(Z, [[1.0, 0.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_reference(self, seed):
        g, rng = random_instance(seed, n=6, feature_dim=4, num_classes=3)
        adj = normalize_adjacency(g)
        params = gcn_params(4, 5, 3, seed=seed)
        Z = gcn_forward(params, adj, g.features)
        ref = dense_gcn(dense_normalized(g), g.features, params.W0, params.W1)
        np.testing.assert_allclose(Z, ref, atol=1e-10)

    def test_non_finite_input_rejected(self):
        g = make_graph(2, [(0, 1)], feature_dim=2)
        adj = normalize_adjacency(g)
        params = ParamSet(W0=np.full((2, 3), np.nan), W1=np.zeros((3, 2)))
        with pytest.raises(NumericalError):
            gcn_forward(params, adj, g.features)


class TestSGCForward:
    def test_identity_propagation(self):
        # No edges: the normalized matrix is exactly the identity.
        feats = np.arange(6.0).reshape(3, 2)
        g = make_graph(3, [], features=feats)
        adj = normalize_adjacency(g)
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        params = ParamSet(W0=W, W1=None, k=1)
        np.testing.assert_allclose(sgc_forward(params, adj, feats, k=1), feats @ W)

    def test_depth_two_is_composition(self):
        g, _ = random_instance(1, n=5, feature_dim=3)
        adj = normalize_adjacency(g)
        W = np.random.default_rng(1).standard_normal((3, 2))
        params = ParamSet(W0=W, W1=None, k=2)
        z2 = sgc_forward(params, adj, g.features, k=2)
        once = adj.matrix @ (g.features @ W)
        np.testing.assert_allclose(z2, adj.matrix @ once, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_reference(self, seed):
        g, _ = random_instance(seed, n=6, feature_dim=4)
        adj = normalize_adjacency(g)
        W = np.random.default_rng(seed + 100).standard_normal((4, 3))
        params = ParamSet(W0=W, W1=None, k=2)
        Z = sgc_forward(params, adj, g.features, k=2)
        D = dense_normalized(g)
        np.testing.assert_allclose(Z, D @ D @ g.features @ W, atol=1e-10)

    def test_invalid_depth(self):
        g = make_graph(2, [(0, 1)])
        adj = normalize_adjacency(g)
        params = ParamSet(W0=np.zeros((2, 2)), W1=None)
        with pytest.raises(ValueError):
            sgc_forward(params, adj, g.features, k=0)


class TestLosses:
    def test_uniform_logits(self):
        logits = np.zeros((4, 7))
        labels = np.array([0, 1, 2, 3])
        assert masked_ce_loss(logits, labels, [0, 1, 2, 3]) == pytest.approx(np.log(7))

    def test_saturated_logits(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = 1e6
        logits[1, 2] = 1e6
        labels = np.array([1, 2])
        assert masked_ce_loss(logits, labels, [0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_three_node_hand_case(self):
        logits = np.array([[1.0, -1.0], [0.5, 0.5], [-2.0, 3.0]])
        labels = np.array([0, 1, 1])
        # Per-node softmax oracle, computed scalar by scalar.
        want = 0.0
        for z, y in zip(logits, labels):
            p = np.exp(z) / np.exp(z).sum()
            want -= np.log(p[y])
        want /= 3
        assert masked_ce_loss(logits, labels, [0, 1, 2]) == pytest.approx(want)

    def test_empty_node_set(self):
        with pytest.raises(ValueError):
            masked_ce_loss(np.zeros((2, 2)), np.zeros(2, dtype=int), [])

    def test_attack_loss_zero_ce(self):
        logits = np.array([[1e9, 0.0]])
        labels = np.array([0])
        assert attack_loss(logits, labels, [0]) == pytest.approx(0.0, abs=1e-12)

    def test_attack_loss_literal_sum(self):
        # Build rows whose cross-entropies are exactly 0.5 and 1.5.
        def row_with_ce(ce):
            # two classes, true class 0: ce = log(1 + e^a) at logits (0, a)
            a = np.log(np.exp(ce) - 1.0)
            return [0.0, a]

        logits = np.array([row_with_ce(0.5), row_with_ce(1.5)])
        labels = np.array([0, 0])
        assert attack_loss(logits, labels, [0, 1]) == pytest.approx(-2.0)

    def test_attack_loss_empty_targets(self):
        with pytest.raises(ValueError):
            attack_loss(np.zeros((2, 2)), np.zeros(2, dtype=int), [])

    def test_attack_equals_negated_count_times_mean(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, 6)
        targets = [1, 3, 4]
        assert attack_loss(logits, labels, targets) == pytest.approx(
            -len(targets) * masked_ce_loss(logits, labels, targets)
        )

    def test_attack_loss_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((4, 3))
        labels = rng.integers(0, 3, 4)
        targets = np.array([0, 2])
        # analytic: -(softmax - onehot) on target rows
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(logits)
        onehot[np.arange(4), labels] = 1.0
        analytic = np.zeros_like(logits)
        analytic[targets] = -(probs - onehot)[targets]
        eps = 1e-6
        for i in range(4):
            for c in range(3):
                z = logits.copy()
                z[i, c] += eps
                hi = attack_loss(z, labels, targets)
                z[i, c] -= 2 * eps
                lo = attack_loss(z, labels, targets)
                assert (hi - lo) / (2 * eps) == pytest.approx(analytic[i, c], abs=1e-8)


class TestBackward:
    def test_zero_weight_network(self):
        g, _ = random_instance(0, n=6, feature_dim=4)
        adj = normalize_adjacency(g)
        params = ParamSet(W0=np.zeros((4, 3)), W1=np.zeros((3, 2)))
        labels = np.zeros(6, dtype=np.int64)
        b = backward(params, adj, g.features, labels, [0, 1, 2])
        assert np.all(b.dW0 == 0.0)
        assert np.all(b.dW1 == 0.0)

    def test_finite_difference_12_nodes(self):
        g, _ = random_instance(7, n=12, feature_dim=5, num_classes=3)
        adj = normalize_adjacency(g)
        params = gcn_params(5, 8, 3, seed=7)
        report = check_gradients(
            params, adj, g.features, g.labels, np.arange(12), epsilon=1e-4
        )
        assert report.overall < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_dA_symmetry(self, seed):
        g, _ = random_instance(seed, n=8, feature_dim=4)
        adj = normalize_adjacency(g)
        params = gcn_params(4, 6, 3, seed=seed)
        b = backward(params, adj, g.features, g.labels, np.arange(8), want_dA=True)
        np.testing.assert_allclose(b.dA.toarray(), b.dA.toarray().T, atol=1e-14)

    def test_l2_norm_matches_concatenation(self):
        g, _ = random_instance(2, n=6, feature_dim=4)
        adj = normalize_adjacency(g)
        params = gcn_params(4, 5, 3, seed=2)
        b = backward(params, adj, g.features, g.labels, np.arange(6))
        want = np.sqrt((b.dW0**2).sum() + (b.dW1**2).sum())
        assert abs(b.l2_norm - want) <= 1e-12 * want

    def test_sgc_finite_difference(self):
        g, _ = random_instance(11, n=10, feature_dim=4, num_classes=3)
        adj = normalize_adjacency(g)
        params = ParamSet.init_sgc(4, 3, seed=11, k=2)
        report = check_gradients(
            params, adj, g.features, g.labels, np.arange(10), epsilon=1e-4
        )
        assert report.overall < 1e-4

    def test_attack_objective_finite_difference(self):
        g, _ = random_instance(13, n=10, feature_dim=4, num_classes=3)
        adj = normalize_adjacency(g)
        params = gcn_params(4, 6, 3, seed=13)
        report = check_gradients(
            params, adj, g.features, g.labels, [0, 3], epsilon=1e-4, objective="attack"
        )
        assert report.overall < 1e-4


class TestSGDStep:
    def test_zero_gradient_fixed_point(self):
        params = ParamSet(W0=np.ones((2, 2)), W1=np.ones((2, 2)), learning_rate=0.5)
        grad = GradientBundle.from_grads(np.zeros((2, 2)), np.zeros((2, 2)))
        out = sgd_step(params, grad)
        np.testing.assert_array_equal(out.W0, params.W0)
        np.testing.assert_array_equal(out.W1, params.W1)

    def test_literal_update(self):
        params = ParamSet(W0=np.array([[2.0]]), W1=np.array([[0.0]]), learning_rate=1.0)
        grad = GradientBundle.from_grads(np.array([[0.5]]), np.array([[0.0]]))
        out = sgd_step(params, grad)
        np.testing.assert_allclose(out.W0, [[1.5]])

    def test_two_steps_equal_doubled_lr(self):
        rng = np.random.default_rng(0)
        g = GradientBundle.from_grads(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))
        p1 = ParamSet(W0=np.ones((3, 2)), W1=np.ones((2, 2)), learning_rate=0.1)
        p2 = ParamSet(W0=np.ones((3, 2)), W1=np.ones((2, 2)), learning_rate=0.2)
        twice = sgd_step(sgd_step(p1, g), g)
        once = sgd_step(p2, g)
        np.testing.assert_allclose(twice.W0, once.W0, atol=1e-15)
        np.testing.assert_allclose(twice.W1, once.W1, atol=1e-15)

    def test_shape_mismatch(self):
        params = ParamSet(W0=np.ones((2, 2)), W1=np.ones((2, 2)))
        grad = GradientBundle.from_grads(np.zeros((3, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            sgd_step(params, grad)

    def test_does_not_mutate_input(self):
        params = ParamSet(W0=np.ones((2, 2)), W1=np.ones((2, 2)), learning_rate=1.0)
        grad = GradientBundle.from_grads(np.ones((2, 2)), np.ones((2, 2)))
        sgd_step(params, grad)
        np.testing.assert_array_equal(params.W0, np.ones((2, 2)))


class TestCheckGradients:
    def test_flat_region(self):
        g = make_graph(4, [(0, 1), (2, 3)], feature_dim=3)
        adj = normalize_adjacency(g)
        params = ParamSet(W0=np.zeros((3, 4)), W1=np.zeros((4, 2)))
        b = backward(
            params, adj, g.features, g.labels, [0, 1], want_dA=True, want_dX=True
        )
        assert np.all(b.dX == 0.0)
        report = check_gradients(params, adj, g.features, g.labels, [0, 1])
        assert report.overall == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck_random_graphs(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 17))
        g, _ = random_instance(seed, n=n, p=0.4, feature_dim=4, num_classes=3)
        adj = normalize_adjacency(g)
        params = gcn_params(4, 5, 3, seed=seed)
        node_set = rng.choice(n, size=max(2, n // 2), replace=False)
        report = check_gradients(params, adj, g.features, g.labels, node_set)
        assert report.overall < 1e-4


class TestTrainingProperties:
    def test_loss_decreases_on_separable_sbm(self):
        g = generate_sbm(0, [10, 10], 0.6, 0.05, feature_dim=4, noise=0.2)
        adj = normalize_adjacency(g)
        params = gcn_params(4, 8, 2, seed=0, lr=0.2)
        train = np.flatnonzero(g.train_mask)
        losses = []
        for _ in range(51):
            losses.append(masked_ce_loss(forward(params, adj, g.features), g.labels, train))
            bundle = backward(params, adj, g.features, g.labels, train)
            params = sgd_step(params, bundle)
        decreases = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert decreases >= 45  # >= 90% of 50 steps

    def test_permutation_equivariance(self):
        g, _ = random_instance(4, n=9, feature_dim=4, num_classes=3)
        params = gcn_params(4, 6, 3, seed=4)
        Z = forward(params, normalize_adjacency(g), g.features)
        rng = np.random.default_rng(8)
        perm = rng.permutation(g.num_nodes)
        edges = [(perm[i], perm[j]) for i, j in g.edge_array()]
        feats = np.empty_like(g.features)
        feats[perm] = g.features
        labels = np.empty_like(g.labels)
        labels[perm] = g.labels
        g2 = build_graph(edges, feats, labels)
        Z2 = forward(params, normalize_adjacency(g2), feats)
        np.testing.assert_allclose(Z2[perm], Z, atol=1e-12)
