"""Sparse undirected graphs with features, labels, splits, and worker partitions.

The graph is stored as CSR (row pointer + sorted column array). Edge removal
tombstones entries in place and compacts lazily, so that attacks removing a
handful of edges per iteration do not pay a full rebuild each time. Edges added
after construction (used by the random/DICE baselines) live in a small overlay
until the next compaction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Graph",
    "NormalizedAdjacency",
    "Partition",
    "Subgraph",
    "build_graph",
    "normalize_adjacency",
    "partition_nodes",
    "sample_1hop",
    "generate_sbm",
    "count_cross_edges",
]

# Compact once this many tombstoned/overlay entries accumulate.
_COMPACT_SLACK = 64


class GraphError(ValueError):
    """Invalid graph construction or mutation."""


class Graph:
    """Undirected graph: CSR adjacency, dense features, labels, split masks.

    Immutable after construction except through the explicit mutation methods
    (``remove_edge``, ``add_edge``, ``set_feature``), which are meant to be
    driven by a single perturbation owner; concurrent readers are safe.
    """

    def __init__(
        self,
        num_nodes: int,
        indptr: np.ndarray,
        indices: np.ndarray,
        features: np.ndarray,
        labels: np.ndarray,
        train_mask: np.ndarray,
        val_mask: np.ndarray,
        test_mask: np.ndarray,
        dropped_self_loops: int = 0,
    ):
        self.num_nodes = int(num_nodes)
        self.indptr = indptr
        self.indices = indices
        self.features = features
        self.labels = labels
        self.train_mask = train_mask
        self.val_mask = val_mask
        self.test_mask = test_mask
        self.dropped_self_loops = dropped_self_loops
        self._alive = np.ones(len(indices), dtype=bool)
        self._extra: dict[int, set[int]] = {}
        self._num_edges = len(indices) // 2
        self._dead = 0

    # -- queries ---------------------------------------------------------

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_nodes else 0

    @property
    def num_edges(self) -> int:
        """Undirected edge count of the current (possibly perturbed) graph."""
        return self._num_edges

    def neighbors(self, i: int) -> np.ndarray:
        base = self.indices[self.indptr[i] : self.indptr[i + 1]]
        mask = self._alive[self.indptr[i] : self.indptr[i + 1]]
        cols = base[mask]
        extra = self._extra.get(i)
        if extra:
            cols = np.concatenate([cols, np.fromiter(extra, dtype=np.int64)])
            cols.sort()
        return cols

    def degree(self, i: int) -> int:
        n = int(np.count_nonzero(self._alive[self.indptr[i] : self.indptr[i + 1]]))
        extra = self._extra.get(i)
        return n + (len(extra) if extra else 0)

    def degrees(self) -> np.ndarray:
        cs = np.concatenate([[0], np.cumsum(self._alive)])
        deg = (cs[self.indptr[1:]] - cs[self.indptr[:-1]]).astype(np.int64)
        for i, extra in self._extra.items():
            deg[i] += len(extra)
        return deg

    def has_edge(self, i: int, j: int) -> bool:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        pos = lo + np.searchsorted(self.indices[lo:hi], j)
        if pos < hi and self.indices[pos] == j and self._alive[pos]:
            return True
        extra = self._extra.get(i)
        return bool(extra and j in extra)

    def edge_array(self) -> np.ndarray:
        """All current undirected edges as an (m, 2) array with i < j."""
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))
        keep = self._alive & (rows < self.indices)
        pairs = [np.column_stack([rows[keep], self.indices[keep]])]
        for i, extra in self._extra.items():
            js = np.fromiter((j for j in extra if i < j), dtype=np.int64)
            if len(js):
                pairs.append(np.column_stack([np.full(len(js), i, dtype=np.int64), js]))
        out = np.concatenate(pairs, axis=0) if pairs else np.empty((0, 2), dtype=np.int64)
        order = np.lexsort((out[:, 1], out[:, 0]))
        return out[order]

    def adjacency_csr(self) -> sp.csr_matrix:
        """Raw adjacency A (no self-loops) as a scipy CSR matrix of 1.0s."""
        e = self.edge_array()
        if len(e) == 0:
            return sp.csr_matrix((self.num_nodes, self.num_nodes), dtype=np.float64)
        r = np.concatenate([e[:, 0], e[:, 1]])
        c = np.concatenate([e[:, 1], e[:, 0]])
        m = sp.coo_matrix(
            (np.ones(len(r)), (r, c)), shape=(self.num_nodes, self.num_nodes)
        ).tocsr()
        m.sort_indices()
        return m

    # -- mutation (perturbation owner only) --------------------------------

    def remove_edge(self, i: int, j: int) -> None:
        if i == j or not self.has_edge(i, j):
            raise GraphError(f"edge ({i}, {j}) not present")
        for a, b in ((i, j), (j, i)):
            extra = self._extra.get(a)
            if extra and b in extra:
                extra.remove(b)
                continue
            lo, hi = self.indptr[a], self.indptr[a + 1]
            pos = lo + np.searchsorted(self.indices[lo:hi], b)
            self._alive[pos] = False
            self._dead += 1
        self._num_edges -= 1
        self._maybe_compact()

    def add_edge(self, i: int, j: int) -> None:
        if i == j:
            raise GraphError("self-loops are not storable")
        if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
            raise GraphError(f"node id out of range in edge ({i}, {j})")
        if self.has_edge(i, j):
            raise GraphError(f"edge ({i}, {j}) already present")
        self._extra.setdefault(i, set()).add(j)
        self._extra.setdefault(j, set()).add(i)
        self._num_edges += 1
        self._maybe_compact()

    def set_feature(self, node: int, dim: int, value: float) -> None:
        self.features[node, dim] = value

    def _maybe_compact(self) -> None:
        overlay = sum(len(s) for s in self._extra.values())
        if self._dead + overlay > max(_COMPACT_SLACK, len(self.indices) // 4):
            self.compact()

    def compact(self) -> None:
        """Rebuild the CSR arrays, folding in tombstones and overlay edges."""
        neigh = [self.neighbors(i) for i in range(self.num_nodes)]
        self.indptr = np.concatenate(
            [[0], np.cumsum([len(c) for c in neigh])]
        ).astype(np.int64)
        self.indices = (
            np.concatenate(neigh) if self.num_nodes else np.empty(0, dtype=np.int64)
        ).astype(np.int64)
        self._alive = np.ones(len(self.indices), dtype=bool)
        self._extra = {}
        self._dead = 0

    def copy(self) -> "Graph":
        g = Graph.__new__(Graph)
        g.num_nodes = self.num_nodes
        g.indptr = self.indptr.copy()
        g.indices = self.indices.copy()
        g.features = self.features.copy()
        g.labels = self.labels.copy()
        g.train_mask = self.train_mask.copy()
        g.val_mask = self.val_mask.copy()
        g.test_mask = self.test_mask.copy()
        g.dropped_self_loops = self.dropped_self_loops
        g._alive = self._alive.copy()
        g._extra = {i: set(s) for i, s in self._extra.items()}
        g._num_edges = self._num_edges
        g._dead = self._dead
        return g


def build_graph(
    edge_list,
    features: np.ndarray,
    labels: np.ndarray,
    splits: tuple = ((), (), ()),
) -> Graph:
    """Build a Graph from an undirected edge list.

    Edges are symmetrized and deduplicated; self-loops are dropped (with a
    counter kept on the graph) because normalization adds them canonically.
    ``splits`` is (train_ids, val_ids, test_ids); a node may appear in at
    most one split.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise GraphError("features must be a nonempty (num_nodes, dim) matrix")
    num_nodes = features.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (num_nodes,):
        raise GraphError(
            f"labels shape {labels.shape} does not match num_nodes={num_nodes}"
        )

    dropped = 0
    pairs = set()
    for i, j in edge_list:
        i, j = int(i), int(j)
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise GraphError(f"edge ({i}, {j}) references a node id >= {num_nodes}")
        if i == j:
            dropped += 1
            continue
        pairs.add((min(i, j), max(i, j)))
    if dropped:
        warnings.warn(f"dropped {dropped} self-loop(s) from input edge list")

    masks = []
    seen: set[int] = set()
    for name, ids in zip(("train", "val", "test"), splits):
        mask = np.zeros(num_nodes, dtype=bool)
        for node in ids:
            node = int(node)
            if not 0 <= node < num_nodes:
                raise GraphError(f"{name} split references node id {node} out of range")
            if node in seen:
                raise GraphError(f"node {node} appears in more than one split")
            seen.add(node)
            mask[node] = True
        masks.append(mask)

    if pairs:
        e = np.array(sorted(pairs), dtype=np.int64)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.searchsorted(rows, np.arange(num_nodes + 1)).astype(np.int64)
        indices = cols
    else:
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        indices = np.empty(0, dtype=np.int64)

    return Graph(
        num_nodes, indptr, indices, features, labels, *masks, dropped_self_loops=dropped
    )


@dataclass
class NormalizedAdjacency:
    """Symmetrically normalized adjacency with self-loops added.

    ``matrix[i, j] = 1/sqrt(deg_sl[i] * deg_sl[j])`` wherever the self-looped
    adjacency has an entry, where ``deg_sl = degree(A) + 1``.
    """

    matrix: sp.csr_matrix
    degrees: np.ndarray  # self-looped degree per node, float64

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def support(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, values) of every stored entry, diagonal included."""
        m = self.matrix
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        return rows, m.indices, m.data

    def edge_list(self) -> np.ndarray:
        """Off-diagonal support as canonical (i < j) undirected pairs."""
        rows, cols, _ = self.support()
        keep = rows < cols
        return np.column_stack([rows[keep], cols[keep]])


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    """Degree-normalize ``g``'s adjacency with self-loops added."""
    deg_sl = g.degrees().astype(np.float64) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg_sl)
    e = g.edge_array()
    diag = np.arange(g.num_nodes)
    rows = np.concatenate([e[:, 0], e[:, 1], diag])
    cols = np.concatenate([e[:, 1], e[:, 0], diag])
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    m = sp.coo_matrix((vals, (rows, cols)), shape=(g.num_nodes, g.num_nodes)).tocsr()
    m.sort_indices()
    return NormalizedAdjacency(matrix=m, degrees=deg_sl)


@dataclass(frozen=True)
class Partition:
    """Assignment of every graph node to one of ``n`` logical workers."""

    assignment: np.ndarray
    n: int

    def share(self, worker: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == worker)

    def training_pool(self, g: Graph, worker: int) -> np.ndarray:
        return np.flatnonzero((self.assignment == worker) & g.train_mask)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # Deterministic integer mixer; Python's hash() of ints is the identity.
    z = (x.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


def partition_nodes(g: Graph, n: int, strategy: str = "round_robin", seed: int = 0) -> Partition:
    """Assign every node to a worker in [0, n).

    ``round_robin`` maps node i to i mod n (equal 1/n shares); ``hash`` uses a
    stable integer mix; ``random`` draws uniform worker ids from ``seed``.
    """
    if n <= 0:
        raise GraphError(f"worker count must be >= 1, got {n}")
    ids = np.arange(g.num_nodes, dtype=np.int64)
    if strategy == "round_robin":
        assignment = ids % n
    elif strategy == "hash":
        assignment = (_splitmix64(ids) % np.uint64(n)).astype(np.int64)
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        assignment = rng.integers(0, n, size=g.num_nodes, dtype=np.int64)
    else:
        raise GraphError(f"unknown partition strategy {strategy!r}")
    return Partition(assignment=assignment, n=n)


def count_cross_edges(g: Graph, part: Partition) -> int:
    """Number of undirected edges whose endpoints live on different workers."""
    e = g.edge_array()
    if len(e) == 0:
        return 0
    return int(np.count_nonzero(part.assignment[e[:, 0]] != part.assignment[e[:, 1]]))


@dataclass
class Subgraph:
    """A target node plus its current 1-hop neighbors, with induced structure.

    ``node_ids[0]`` is always the target. ``edges`` holds the induced
    undirected adjacency in local ids (canonical i < j).
    """

    node_ids: np.ndarray
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    local_of: dict[int, int] = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def to_graph(self) -> Graph:
        return build_graph(self.edges, self.features, self.labels)

    def to_global(self, i: int, j: int) -> tuple[int, int]:
        a, b = int(self.node_ids[i]), int(self.node_ids[j])
        return (a, b) if a < b else (b, a)


def sample_1hop(g: Graph, target: int) -> Subgraph:
    """Induced subgraph on the target and all of its current neighbors."""
    if not 0 <= target < g.num_nodes:
        raise GraphError(f"target node {target} out of range")
    neigh = g.neighbors(target)
    node_ids = np.concatenate([[target], neigh]).astype(np.int64)
    local_of = {int(v): k for k, v in enumerate(node_ids)}
    edges = []
    for li, v in enumerate(node_ids):
        for w in g.neighbors(int(v)):
            lw = local_of.get(int(w))
            if lw is not None and li < lw:
                edges.append((li, lw))
    edges = np.array(edges, dtype=np.int64) if edges else np.empty((0, 2), dtype=np.int64)
    return Subgraph(
        node_ids=node_ids,
        edges=edges,
        features=g.features[node_ids].copy(),
        labels=g.labels[node_ids].copy(),
        local_of=local_of,
    )


def generate_sbm(
    seed: int,
    block_sizes,
    p_intra: float,
    p_inter: float,
    feature_dim: int,
    noise: float,
    train_frac: float = 0.3,
    val_frac: float = 0.2,
) -> Graph:
    """Stochastic block model graph with label = block id.

    Features are one-hot(label) plus Gaussian noise of scale ``noise``.
    Splits are stratified per block so every class is represented in
    training. Deterministic per seed.
    """
    block_sizes = list(block_sizes)
    if not block_sizes:
        raise GraphError("block_sizes must be nonempty")
    if not (0.0 <= p_intra <= 1.0 and 0.0 <= p_inter <= 1.0):
        raise GraphError("edge probabilities must lie in [0, 1]")
    if feature_dim < len(block_sizes):
        raise GraphError(
            f"feature_dim={feature_dim} cannot one-hot {len(block_sizes)} blocks"
        )
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes).astype(np.int64)
    n = len(labels)

    # Bernoulli on the upper triangle, probability by block pair.
    u = rng.random((n, n))
    prob = np.where(labels[:, None] == labels[None, :], p_intra, p_inter)
    iu, ju = np.triu_indices(n, k=1)
    keep = u[iu, ju] < prob[iu, ju]
    edges = np.column_stack([iu[keep], ju[keep]])

    features = noise * rng.standard_normal((n, feature_dim))
    features[np.arange(n), labels] += 1.0

    train, val = [], []
    for b in range(len(block_sizes)):
        members = rng.permutation(np.flatnonzero(labels == b))
        n_train = int(round(train_frac * len(members)))
        n_val = int(round(val_frac * len(members)))
        train.extend(members[:n_train])
        val.extend(members[n_train : n_train + n_val])
    test = sorted(set(range(n)) - set(train) - set(val))
    return build_graph(edges, features, labels, (train, val, test))
