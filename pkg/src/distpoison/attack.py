"""Gradient-guided poisoning of one worker's training data, plus baselines.

The main attack loop alternates: (re)train a surrogate 2-layer GCN on the
current perturbed graph, pull attack-loss gradients for each target's 1-hop
subgraph, score existing edges (gradient value plus a cross-worker bonus for
edges that span computing nodes), remove the top-scoring edges, and flip the
feature entries with the largest gradient magnitude. A nonzero homophily
weight debits every candidate by the shift it would cause in the graph's
homophily distribution, trading raw damage for stealth.

Scores are the attack-loss gradient at each adjacency entry: removing an edge
is a unit step down in that entry, so edges with the largest positive gradient
are the removals that most increase the targets' cross-entropy to first
order. Only candidates expected to help (score > 0) are ever taken.

Feature flips follow the sign rule x <- x * (1 - 2*sgn(grad)): positive
gradients negate the entry; zero gradients leave it alone (and do not consume
budget); negative gradients triple it as literally specified, with
``strict_flip=False`` substituting plain negation for that branch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from distpoison.gnn import ParamSet, backward, forward, masked_ce_loss, sgd_step
from distpoison.graph import Graph, Partition, Subgraph, normalize_adjacency, sample_1hop
from distpoison.homophily import (
    distribution_distance,
    homophily_after_edge_removal,
    homophily_after_feature_change,
    homophily_values,
)

__all__ = [
    "AttackConfig",
    "ScoreMatrix",
    "PerturbationSet",
    "EdgeRemoval",
    "EdgeAddition",
    "FeatureFlip",
    "train_surrogate",
    "combined_subgraph_gradient",
    "communication_matrix",
    "edge_scores",
    "select_edge_removals",
    "select_targets",
    "flip_features",
    "run_disttack",
    "baseline_random",
    "baseline_dice",
]


@dataclass
class AttackConfig:
    """Knobs of the attack; budgets bound the feasible perturbation set."""

    edge_budget: int = 0
    feature_budget: int = 0
    w_A: float = 1.0
    w_X: float = 1.0
    lambda_comm: float = 0.1
    lambda_homo: float = 1.0
    surrogate_epochs: int = 50
    surrogate_hidden: int = 16
    surrogate_lr: float = 0.2
    target_rule: str = "high_degree"
    target_count: int = 5
    seed: int = 0
    strict_flip: bool = True
    edges_per_iter: int = 1
    flips_per_iter: int = 1
    warm_start: bool = False
    homophily_measure: str = "wasserstein1"

    def __post_init__(self):
        if self.edge_budget < 0 or self.feature_budget < 0:
            raise ValueError("budgets must be nonnegative")
        if self.w_A < 0 or self.w_X < 0:
            raise ValueError("gradient weights must be nonnegative")
        if self.lambda_homo < 0:
            raise ValueError("lambda_homo must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EdgeRemoval:
    i: int
    j: int
    score: float
    iteration: int


@dataclass
class EdgeAddition:
    i: int
    j: int
    iteration: int


@dataclass
class FeatureFlip:
    node: int
    dim: int
    old: float
    new: float
    sign: int
    iteration: int


@dataclass
class PerturbationSet:
    """Ordered audit trail of an attack; replayable against any trainer."""

    edges_removed: list[EdgeRemoval] = field(default_factory=list)
    edges_added: list[EdgeAddition] = field(default_factory=list)
    features_flipped: list[FeatureFlip] = field(default_factory=list)
    homophily_penalties: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def apply_to(self, g: Graph) -> Graph:
        """Fresh perturbed copy of ``g``; the input is untouched."""
        out = g.copy()
        for rem in self.edges_removed:
            out.remove_edge(rem.i, rem.j)
        for add in self.edges_added:
            out.add_edge(add.i, add.j)
        for flip in self.features_flipped:
            out.set_feature(flip.node, flip.dim, flip.new)
        return out

    @property
    def size(self) -> int:
        return len(self.edges_removed) + len(self.edges_added) + len(self.features_flipped)

    def to_dict(self) -> dict:
        return {
            "edges_removed": [
                {"i": r.i, "j": r.j, "score": r.score, "iter": r.iteration}
                for r in self.edges_removed
            ],
            "edges_added": [
                {"i": a.i, "j": a.j, "iter": a.iteration} for a in self.edges_added
            ],
            "features_flipped": [
                {
                    "node": f.node,
                    "dim": f.dim,
                    "old": f.old,
                    "new": f.new,
                    "sign": f.sign,
                    "iter": f.iteration,
                }
                for f in self.features_flipped
            ],
            "homophily_penalties": list(self.homophily_penalties),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSet":
        return cls(
            edges_removed=[
                EdgeRemoval(r["i"], r["j"], r["score"], r["iter"])
                for r in d.get("edges_removed", [])
            ],
            edges_added=[
                EdgeAddition(a["i"], a["j"], a["iter"]) for a in d.get("edges_added", [])
            ],
            features_flipped=[
                FeatureFlip(f["node"], f["dim"], f["old"], f["new"], f["sign"], f["iter"])
                for f in d.get("features_flipped", [])
            ],
            homophily_penalties=list(d.get("homophily_penalties", [])),
            config=d.get("config", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "PerturbationSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train_surrogate(
    g: Graph,
    epochs: int,
    seed: int,
    hidden_dim: int = 16,
    learning_rate: float = 0.2,
    init: ParamSet | None = None,
) -> ParamSet:
    """Full-batch GCN trained on the graph's training nodes.

    ``init`` warm-starts from an earlier surrogate instead of reinitializing.
    Raises on divergence (non-finite loss or gradients).
    """
    train = np.flatnonzero(g.train_mask)
    if len(train) == 0:
        raise ValueError("graph has no training nodes")
    adj = normalize_adjacency(g)
    params = (
        init.copy()
        if init is not None
        else ParamSet.init_gcn(
            g.feature_dim, hidden_dim, g.num_classes, seed=seed, learning_rate=learning_rate
        )
    )
    for _ in range(epochs):
        bundle = backward(params, adj, g.features, g.labels, train)
        params = sgd_step(params, bundle)
    return params


@dataclass
class ScoreMatrix:
    """Per-edge removal scores for one sampled subgraph (symmetric, local ids)."""

    scores: sp.csr_matrix
    sub: Subgraph

    def global_items(self) -> dict[tuple[int, int], float]:
        out = {}
        coo = sp.triu(self.scores.tocoo(), k=1)
        for i, j, v in zip(coo.row, coo.col, coo.data):
            out[self.sub.to_global(int(i), int(j))] = float(v)
        return out


def combined_subgraph_gradient(
    theta: ParamSet, sub: Subgraph, cfg: AttackConfig
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Weighted attack-loss gradients w.r.t. the subgraph's adjacency and features.

    The target is local node 0; gradients are taken under the frozen
    surrogate on the induced subgraph.
    """
    if sub.num_nodes == 0:
        raise ValueError("empty subgraph")
    local = sub.to_graph()
    adj = normalize_adjacency(local)
    bundle = backward(
        theta,
        adj,
        sub.features,
        sub.labels,
        node_set=[0],
        want_dA=True,
        want_dX=True,
        objective="attack",
    )
    return cfg.w_A * bundle.dA, cfg.w_X * bundle.dX


def communication_matrix(sub: Subgraph, part: Partition) -> sp.csr_matrix:
    """+1 on subgraph edges crossing workers, -1 on same-worker edges."""
    n = sub.num_nodes
    if len(sub.edges) == 0:
        return sp.csr_matrix((n, n), dtype=np.float64)
    gi = sub.node_ids[sub.edges[:, 0]]
    gj = sub.node_ids[sub.edges[:, 1]]
    if gi.max(initial=-1) >= len(part.assignment) or gj.max(initial=-1) >= len(part.assignment):
        raise ValueError("subgraph node missing from partition assignment")
    vals = np.where(part.assignment[gi] != part.assignment[gj], 1.0, -1.0)
    r = np.concatenate([sub.edges[:, 0], sub.edges[:, 1]])
    c = np.concatenate([sub.edges[:, 1], sub.edges[:, 0]])
    return sp.coo_matrix((np.concatenate([vals, vals]), (r, c)), shape=(n, n)).tocsr()


def edge_scores(
    edge_grad: sp.csr_matrix, sub: Subgraph, part: Partition, lambda_comm: float
) -> ScoreMatrix:
    """Removal scores on the subgraph's existing edges: gradient + comm bonus."""
    n = sub.num_nodes
    comm = communication_matrix(sub, part)
    if len(sub.edges) == 0:
        return ScoreMatrix(scores=sp.csr_matrix((n, n)), sub=sub)
    i, j = sub.edges[:, 0], sub.edges[:, 1]
    vals = np.asarray(edge_grad[i, j]).ravel() + lambda_comm * np.asarray(comm[i, j]).ravel()
    r = np.concatenate([i, j])
    c = np.concatenate([j, i])
    s = sp.coo_matrix((np.concatenate([vals, vals]), (r, c)), shape=(n, n)).tocsr()
    return ScoreMatrix(scores=s, sub=sub)


def select_edge_removals(scores, k: int) -> list[tuple[int, int, float]]:
    """Top-k positive-score edges, descending; ties broken by (min id, max id).

    Accepts a ScoreMatrix or a mapping {(i, j): score} with i < j. Edges with
    score <= 0 are ineligible: a removal must be expected to help the attack.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    items = scores.global_items() if isinstance(scores, ScoreMatrix) else dict(scores)
    eligible = [(i, j, s) for (i, j), s in items.items() if s > 0.0]
    eligible.sort(key=lambda t: (-t[2], t[0], t[1]))
    return eligible[:k]


def flip_features(
    X_row: np.ndarray, grad_row: np.ndarray, m: int, strict: bool = True
) -> tuple[np.ndarray, list[tuple[int, float, float, int]]]:
    """Flip up to ``m`` entries of one feature row along the gradient sign rule.

    Dimensions are taken in decreasing gradient magnitude; zero-gradient
    dimensions are skipped without consuming ``m``. Returns the new row and
    (dim, old, new, sign) records.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if X_row.shape != grad_row.shape:
        raise ValueError("feature and gradient rows differ in length")
    order = np.argsort(-np.abs(grad_row), kind="stable")
    out = X_row.copy()
    records = []
    for dim in order:
        if len(records) >= m:
            break
        sign = int(np.sign(grad_row[dim]))
        if sign == 0:
            continue
        mult = (1 - 2 * sign) if strict else -1.0
        old = float(out[dim])
        out[dim] = old * mult
        records.append((int(dim), old, float(out[dim]), sign))
    return out, records


def select_targets(
    g: Graph, part: Partition, worker: int, count: int, rule: str = "high_degree"
) -> list[int]:
    """Training nodes on the worker's share to attack; highest degree first."""
    if rule != "high_degree":
        raise ValueError(f"unknown target rule {rule!r}")
    pool = part.training_pool(g, worker)
    if len(pool) == 0:
        raise ValueError(f"worker {worker} owns no training nodes")
    degs = np.array([g.degree(int(v)) for v in pool])
    order = np.lexsort((pool, -degs))
    return [int(v) for v in pool[order][:count]]


def _flip_value(old: float, sign: int, strict: bool) -> float:
    mult = (1 - 2 * sign) if strict else -1.0
    return old * mult


def run_disttack(
    g: Graph, part: Partition, cfg: AttackConfig, targets: list[int]
) -> PerturbationSet:
    """Iterative perturbation of the poisoned worker's neighborhood.

    Each iteration refreshes the surrogate on the running perturbed graph,
    scores candidates from every target's current 1-hop subgraph, then spends
    up to ``edges_per_iter`` edge removals and ``flips_per_iter`` feature
    flips of the remaining budgets. Stops when budgets are exhausted or no
    eligible candidate remains.
    """
    targets = [int(t) for t in targets]
    if not targets:
        raise ValueError("targets must be nonempty")
    workers = {int(part.assignment[t]) for t in targets}
    if len(workers) != 1:
        raise ValueError(f"targets span multiple workers: {sorted(workers)}")

    g_cur = g.copy()
    pert = PerturbationSet(config=dict(cfg.to_dict(), kind="disttack"))
    edges_left = cfg.edge_budget
    flips_left = cfg.feature_budget
    flipped: set[tuple[int, int]] = set()
    surrogate: ParamSet | None = None

    use_homo = cfg.lambda_homo > 0.0
    if use_homo:
        h_clean = homophily_values(g)
        h_cur = h_clean.copy()
        base_dist = 0.0

    iteration = 0
    while edges_left > 0 or flips_left > 0:
        iteration += 1
        surrogate = train_surrogate(
            g_cur,
            cfg.surrogate_epochs,
            cfg.seed,
            hidden_dim=cfg.surrogate_hidden,
            learning_rate=cfg.surrogate_lr,
            init=surrogate if cfg.warm_start else None,
        )

        edge_cands: dict[tuple[int, int], float] = {}
        feat_grads: dict[int, np.ndarray] = {}
        for t in targets:
            sub = sample_1hop(g_cur, t)
            edge_grad, feat_grad = combined_subgraph_gradient(surrogate, sub, cfg)
            for key, s in edge_scores(edge_grad, sub, part, cfg.lambda_comm).global_items().items():
                edge_cands[key] = edge_cands.get(key, 0.0) + s
            for local, node in enumerate(sub.node_ids):
                node = int(node)
                if node in feat_grads:
                    feat_grads[node] = feat_grads[node] + feat_grad[local]
                else:
                    feat_grads[node] = feat_grad[local].copy()

        applied = False

        if edges_left > 0 and edge_cands:
            if use_homo:
                # Greedy increment of the stealth regularizer: distance change
                # of the candidate against the running perturbed graph. Signed,
                # so shift-reducing candidates earn a bonus.
                penalized = {}
                penalties = {}
                for (i, j), s in edge_cands.items():
                    h_trial = homophily_after_edge_removal(g_cur, h_cur, i, j)
                    delta = (
                        distribution_distance(h_clean, h_trial, cfg.homophily_measure)
                        - base_dist
                    )
                    penalties[(i, j)] = cfg.lambda_homo * delta
                    penalized[(i, j)] = s - penalties[(i, j)]
            else:
                penalized = edge_cands
                penalties = {key: 0.0 for key in edge_cands}
            for i, j, s in select_edge_removals(penalized, min(cfg.edges_per_iter, edges_left)):
                if use_homo:
                    h_cur = homophily_after_edge_removal(g_cur, h_cur, i, j)
                    base_dist = distribution_distance(h_clean, h_cur, cfg.homophily_measure)
                g_cur.remove_edge(i, j)
                pert.edges_removed.append(EdgeRemoval(i, j, s, iteration))
                pert.homophily_penalties.append(penalties[(i, j)])
                edges_left -= 1
                applied = True

        if flips_left > 0 and feat_grads:
            cands = []  # (penalized score, node, dim, sign, penalty)
            for node, grow in feat_grads.items():
                for dim in range(len(grow)):
                    if (node, dim) in flipped:
                        continue
                    sign = int(np.sign(grow[dim]))
                    if sign == 0:
                        continue
                    score = abs(grow[dim])
                    penalty = 0.0
                    if use_homo:
                        old = g_cur.features[node, dim]
                        new_row = g_cur.features[node].copy()
                        new_row[dim] = _flip_value(old, sign, cfg.strict_flip)
                        h_trial = homophily_after_feature_change(g_cur, h_cur, node, new_row)
                        penalty = cfg.lambda_homo * (
                            distribution_distance(h_clean, h_trial, cfg.homophily_measure)
                            - base_dist
                        )
                    cands.append((score - penalty, node, dim, sign, penalty))
            cands = [c for c in cands if c[0] > 0.0]
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            for score, node, dim, sign, penalty in cands[: min(cfg.flips_per_iter, flips_left)]:
                old = float(g_cur.features[node, dim])
                new = _flip_value(old, sign, cfg.strict_flip)
                if use_homo:
                    new_row = g_cur.features[node].copy()
                    new_row[dim] = new
                    h_cur = homophily_after_feature_change(g_cur, h_cur, node, new_row)
                    base_dist = distribution_distance(h_clean, h_cur, cfg.homophily_measure)
                g_cur.set_feature(node, dim, new)
                pert.features_flipped.append(FeatureFlip(node, dim, old, new, sign, iteration))
                pert.homophily_penalties.append(penalty)
                flipped.add((node, dim))
                flips_left -= 1
                applied = True

        if not applied:
            break
    return pert


def baseline_random(
    g: Graph,
    part: Partition,
    edge_budget: int,
    feature_budget: int,
    seed: int,
    poisoned_worker: int = 0,
) -> PerturbationSet:
    """Random edge removals/additions and feature sign flips on one share."""
    if edge_budget < 0 or feature_budget < 0:
        raise ValueError("budgets must be nonnegative")
    rng = np.random.default_rng(seed)
    share = set(int(v) for v in part.share(poisoned_worker))
    pert = PerturbationSet(
        config={
            "kind": "ra",
            "edge_budget": edge_budget,
            "feature_budget": feature_budget,
            "seed": seed,
            "poisoned_worker": poisoned_worker,
        }
    )
    base_edges = [
        (int(i), int(j))
        for i, j in g.edge_array()
        if int(i) in share or int(j) in share
    ]
    removed: set[tuple[int, int]] = set()
    added: set[tuple[int, int]] = set()
    share_list = sorted(share)
    for unit in range(edge_budget):
        if rng.random() < 0.5:
            avail = [e for e in base_edges if e not in removed]
            if not avail:
                continue
            i, j = avail[rng.integers(len(avail))]
            removed.add((i, j))
            pert.edges_removed.append(EdgeRemoval(i, j, 0.0, unit + 1))
        else:
            pick = None
            for _ in range(1000):
                u = share_list[rng.integers(len(share_list))]
                v = int(rng.integers(g.num_nodes))
                key = (min(u, v), max(u, v))
                if u != v and not g.has_edge(u, v) and key not in added:
                    pick = key
                    break
            if pick is None:
                continue
            added.add(pick)
            pert.edges_added.append(EdgeAddition(pick[0], pick[1], unit + 1))
    flipped: set[tuple[int, int]] = set()
    for unit in range(feature_budget):
        pick = None
        for _ in range(1000):
            node = share_list[rng.integers(len(share_list))]
            dim = int(rng.integers(g.feature_dim))
            if (node, dim) not in flipped:
                pick = (node, dim)
                break
        if pick is None:
            continue
        node, dim = pick
        flipped.add(pick)
        old = float(g.features[node, dim])
        pert.features_flipped.append(FeatureFlip(node, dim, old, -old, 1, unit + 1))
    return pert


def baseline_dice(
    g: Graph,
    part: Partition,
    edge_budget: int,
    seed: int,
    poisoned_worker: int = 0,
) -> PerturbationSet:
    """Remove same-label edges / add different-label edges on one share.

    Each budget unit flips a fair coin between the two moves; a unit with no
    eligible candidate is skipped.
    """
    if edge_budget < 0:
        raise ValueError("edge budget must be nonnegative")
    rng = np.random.default_rng(seed)
    share = set(int(v) for v in part.share(poisoned_worker))
    pert = PerturbationSet(
        config={
            "kind": "dice",
            "edge_budget": edge_budget,
            "seed": seed,
            "poisoned_worker": poisoned_worker,
        }
    )
    removed: set[tuple[int, int]] = set()
    added: set[tuple[int, int]] = set()
    labels = g.labels
    base_edges = [
        (int(i), int(j))
        for i, j in g.edge_array()
        if int(i) in share or int(j) in share
    ]
    share_list = sorted(share)
    for unit in range(edge_budget):
        if rng.random() < 0.5:
            avail = [
                e for e in base_edges if labels[e[0]] == labels[e[1]] and e not in removed
            ]
            if not avail:
                continue
            i, j = avail[rng.integers(len(avail))]
            removed.add((i, j))
            pert.edges_removed.append(EdgeRemoval(i, j, 0.0, unit + 1))
        else:
            avail = [
                (min(u, v), max(u, v))
                for u in share_list
                for v in range(g.num_nodes)
                if u != v
                and labels[u] != labels[v]
                and not g.has_edge(u, v)
                and (min(u, v), max(u, v)) not in added
            ]
            if not avail:
                continue
            i, j = avail[rng.integers(len(avail))]
            added.add((i, j))
            pert.edges_added.append(EdgeAddition(i, j, unit + 1))
    return pert


def surrogate_attack_loss(theta: ParamSet, g: Graph, targets) -> float:
    """Sum of target cross-entropies under a frozen surrogate: the damage."""
    adj = normalize_adjacency(g)
    logits = forward(theta, adj, g.features)
    return len(targets) * masked_ce_loss(logits, g.labels, targets)
