import numpy as np

from distpoison.graph import build_graph


def make_graph(num_nodes, edges, feature_dim=2, features=None, labels=None, splits=((), (), ())):
    if features is None:
        features = np.zeros((num_nodes, feature_dim))
    if labels is None:
        labels = np.zeros(num_nodes, dtype=np.int64)
    return build_graph(edges, features, labels, splits)


def dense_normalized(g):
    """Independent dense construction of the self-looped normalization."""
    a = np.zeros((g.num_nodes, g.num_nodes))
    for i, j in g.edge_array():
        a[i, j] = a[j, i] = 1.0
    a += np.eye(g.num_nodes)
    d = a.sum(axis=1)
    dinv = np.diag(1.0 / np.sqrt(d))
    return dinv @ a @ dinv


def random_instance(seed, n=12, p=0.35, feature_dim=6, num_classes=3, hidden=8):
    """Seeded random graph + GCN weights for gradient and forward tests."""
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    features = rng.standard_normal((n, feature_dim))
    labels = rng.integers(0, num_classes, size=n).astype(np.int64)
    g = build_graph(edges, features, labels)
    return g, rng
