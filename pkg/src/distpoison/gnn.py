"""Forward and backward passes for small GCN / SGC models on sparse graphs.

The two architectures share a weight container: a 2-layer GCN holds (W0, W1)
and propagates ``A_hat @ relu(A_hat @ X @ W0) @ W1``; SGC holds a single W
(``W1 is None``) and propagates ``A_hat^k @ X @ W``. Reverse mode produces
exact gradients for the weights and, on request, for the node features and
for each existing undirected adjacency entry -- the latter chained through
the symmetric degree normalization, degree terms included, so that removing
an edge is differentiated faithfully.

All math is float64. ReLU's subgradient at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from distpoison.graph import NormalizedAdjacency

__all__ = [
    "ParamSet",
    "GradientBundle",
    "NumericalError",
    "gcn_forward",
    "sgc_forward",
    "forward",
    "masked_ce_loss",
    "attack_loss",
    "backward",
    "sgd_step",
    "check_gradients",
    "GradCheckReport",
    "predict_accuracy",
]


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""


@dataclass
class ParamSet:
    """Model weights plus optimizer hyperparameters and state.

    ``W1 is None`` selects the single-weight linear propagation model with
    depth ``k``. ``velocity`` holds per-weight momentum buffers; with the
    default ``momentum=0.0`` the update is plain SGD.
    """

    W0: np.ndarray
    W1: np.ndarray | None = None
    learning_rate: float = 0.1
    momentum: float = 0.0
    k: int = 2
    velocity: list[np.ndarray] | None = field(default=None, repr=False)

    def weights(self) -> list[np.ndarray]:
        return [self.W0] if self.W1 is None else [self.W0, self.W1]

    def copy(self) -> "ParamSet":
        return ParamSet(
            W0=self.W0.copy(),
            W1=None if self.W1 is None else self.W1.copy(),
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            k=self.k,
            velocity=None if self.velocity is None else [v.copy() for v in self.velocity],
        )

    @staticmethod
    def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_in, fan_out))

    @classmethod
    def init_gcn(
        cls,
        feature_dim: int,
        hidden_dim: int,
        num_classes: int,
        seed: int = 0,
        learning_rate: float = 0.1,
        momentum: float = 0.0,
    ) -> "ParamSet":
        rng = np.random.default_rng(seed)
        return cls(
            W0=cls._glorot(rng, feature_dim, hidden_dim),
            W1=cls._glorot(rng, hidden_dim, num_classes),
            learning_rate=learning_rate,
            momentum=momentum,
        )

    @classmethod
    def init_sgc(
        cls,
        feature_dim: int,
        num_classes: int,
        seed: int = 0,
        learning_rate: float = 0.1,
        k: int = 2,
        momentum: float = 0.0,
    ) -> "ParamSet":
        rng = np.random.default_rng(seed)
        return cls(
            W0=cls._glorot(rng, feature_dim, num_classes),
            W1=None,
            learning_rate=learning_rate,
            momentum=momentum,
            k=k,
        )


@dataclass
class GradientBundle:
    """Gradients of a loss w.r.t. weights and optionally adjacency/features.

    ``dA`` (when present) is a symmetric sparse matrix over existing edges of
    the unnormalized adjacency; ``l2_norm`` is the Euclidean norm of the
    flattened weight gradients.
    """

    dW0: np.ndarray
    dW1: np.ndarray | None = None
    dA: sp.csr_matrix | None = None
    dX: np.ndarray | None = None
    l2_norm: float = 0.0

    @classmethod
    def from_grads(cls, dW0, dW1=None, dA=None, dX=None) -> "GradientBundle":
        sq = float((dW0**2).sum())
        if dW1 is not None:
            sq += float((dW1**2).sum())
        return cls(dW0=dW0, dW1=dW1, dA=dA, dX=dX, l2_norm=float(np.sqrt(sq)))

    def weight_grads(self) -> list[np.ndarray]:
        return [self.dW0] if self.dW1 is None else [self.dW0, self.dW1]


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values encountered in {name}")


def gcn_forward(params: ParamSet, adj: NormalizedAdjacency, X: np.ndarray) -> np.ndarray:
    """Logits of the 2-layer GCN (no activation on the output layer)."""
    if params.W1 is None:
        raise ValueError("gcn_forward requires a two-weight ParamSet")
    _check_finite("gcn_forward inputs", X, params.W0, params.W1)
    A = adj.matrix
    H = np.maximum(A @ (X @ params.W0), 0.0)
    Z = A @ (H @ params.W1)
    _check_finite("gcn_forward logits", Z)
    return Z


def sgc_forward(params: ParamSet, adj: NormalizedAdjacency, X: np.ndarray, k: int) -> np.ndarray:
    """Logits of the linear model: k propagation steps then one weight."""
    if k < 1:
        raise ValueError(f"propagation depth must be >= 1, got {k}")
    _check_finite("sgc_forward inputs", X, params.W0)
    U = X @ params.W0
    for _ in range(k):
        U = adj.matrix @ U
    _check_finite("sgc_forward logits", U)
    return U


def forward(params: ParamSet, adj: NormalizedAdjacency, X: np.ndarray) -> np.ndarray:
    if params.W1 is None:
        return sgc_forward(params, adj, X, params.k)
    return gcn_forward(params, adj, X)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def masked_ce_loss(logits: np.ndarray, labels: np.ndarray, node_set) -> float:
    """Mean cross-entropy over the given node ids."""
    node_set = np.asarray(node_set, dtype=np.int64)
    if len(node_set) == 0:
        raise ValueError("node_set must be nonempty")
    ls = _log_softmax(logits[node_set])
    return float(-ls[np.arange(len(node_set)), labels[node_set]].mean())


def attack_loss(logits: np.ndarray, labels: np.ndarray, target_set) -> float:
    """Negated sum of target-node cross-entropies; the attacker drives this down."""
    target_set = np.asarray(target_set, dtype=np.int64)
    if len(target_set) == 0:
        raise ValueError("target_set must be nonempty")
    ls = _log_softmax(logits[target_set])
    return float(ls[np.arange(len(target_set)), labels[target_set]].sum())


def _loss_grad_logits(
    logits: np.ndarray, labels: np.ndarray, node_set: np.ndarray, objective: str
) -> np.ndarray:
    """dLoss/dlogits, zero outside node_set rows."""
    probs = np.exp(_log_softmax(logits[node_set]))
    probs[np.arange(len(node_set)), labels[node_set]] -= 1.0
    dZ = np.zeros_like(logits)
    if objective == "masked_ce":
        dZ[node_set] = probs / len(node_set)
    elif objective == "attack":
        dZ[node_set] = -probs
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return dZ


def _adjacency_entry_grads(
    adj: NormalizedAdjacency, products: list[tuple[np.ndarray, np.ndarray]]
) -> sp.csr_matrix:
    """Gradient w.r.t. each existing undirected entry of the raw adjacency.

    ``products`` is a list of (upstream, downstream) pairs such that the loss
    gradient w.r.t. the normalized matrix is ``sum_t upstream_t @ downstream_t.T``,
    needed only on the normalized support. Chains through the entry value and
    through both endpoint degrees.
    """

    rows, cols, avals = adj.support()

    def m_entries(r, c):
        out = np.zeros(len(r))
        for up, down in products:
            out += np.einsum("ij,ij->i", up[r], down[c])
        return out

    m_support = m_entries(rows, cols)
    t_vals = m_support * avals
    n = adj.num_nodes
    row_sums = np.bincount(rows, weights=t_vals, minlength=n)
    col_sums = np.bincount(cols, weights=t_vals, minlength=n)
    deg = adj.degrees

    edges = adj.edge_list()
    if len(edges) == 0:
        return sp.csr_matrix((n, n), dtype=np.float64)
    k, l = edges[:, 0], edges[:, 1]
    direct = (m_entries(k, l) + m_entries(l, k)) / np.sqrt(deg[k] * deg[l])
    degree_term = 0.5 * (
        (row_sums[k] + col_sums[k]) / deg[k] + (row_sums[l] + col_sums[l]) / deg[l]
    )
    vals = direct - degree_term
    dA = sp.coo_matrix(
        (np.concatenate([vals, vals]), (np.concatenate([k, l]), np.concatenate([l, k]))),
        shape=(n, n),
    ).tocsr()
    dA.sort_indices()
    return dA


def backward(
    params: ParamSet,
    adj: NormalizedAdjacency,
    X: np.ndarray,
    labels: np.ndarray,
    node_set,
    want_dA: bool = False,
    want_dX: bool = False,
    objective: str = "masked_ce",
) -> GradientBundle:
    """Exact reverse-mode gradients of the chosen objective.

    ``objective`` is "masked_ce" (mean CE over node_set, the training loss)
    or "attack" (negated CE sum over node_set as targets).
    """
    node_set = np.asarray(node_set, dtype=np.int64)
    if len(node_set) == 0:
        raise ValueError("node_set must be nonempty")
    _check_finite("backward inputs", X, *params.weights())
    A = adj.matrix

    if params.W1 is not None:
        P = X @ params.W0
        S0 = A @ P
        H = np.maximum(S0, 0.0)
        Q = H @ params.W1
        Z = A @ Q
        dZ = _loss_grad_logits(Z, labels, node_set, objective)
        dQ = A @ dZ  # A is symmetric
        dW1 = H.T @ dQ
        dS0 = (dQ @ params.W1.T) * (S0 > 0.0)
        dP = A @ dS0
        dW0 = X.T @ dP
        dX = dP @ params.W0.T if want_dX else None
        dA = _adjacency_entry_grads(adj, [(dZ, Q), (dS0, P)]) if want_dA else None
        _check_finite("backward gradients", dW0, dW1, dX)
        return GradientBundle.from_grads(dW0, dW1, dA, dX)

    # Linear propagation model: Z = A^k (X W0).
    us = [X @ params.W0]
    for _ in range(params.k):
        us.append(A @ us[-1])
    Z = us[-1]
    dZ = _loss_grad_logits(Z, labels, node_set, objective)
    dus = [dZ]
    for _ in range(params.k):
        dus.append(A @ dus[-1])
    dus.reverse()  # dus[t] = dLoss/dU_t
    dW0 = X.T @ dus[0]
    dX = dus[0] @ params.W0.T if want_dX else None
    dA = (
        _adjacency_entry_grads(
            adj, [(dus[t + 1], us[t]) for t in range(params.k)]
        )
        if want_dA
        else None
    )
    _check_finite("backward gradients", dW0, dX)
    return GradientBundle.from_grads(dW0, None, dA, dX)


def sgd_step(params: ParamSet, grad: GradientBundle) -> ParamSet:
    """One descent step; returns a new ParamSet, inputs untouched."""
    weights = params.weights()
    grads = grad.weight_grads()
    if len(weights) != len(grads) or any(
        w.shape != g.shape for w, g in zip(weights, grads)
    ):
        raise ValueError("gradient shapes do not match parameter shapes")
    new = params.copy()
    if params.momentum != 0.0:
        if new.velocity is None:
            new.velocity = [np.zeros_like(w) for w in weights]
        steps = []
        for v, g in zip(new.velocity, grads):
            v *= params.momentum
            v += g
            steps.append(v)
    else:
        steps = grads
    new.W0 = new.W0 - params.learning_rate * steps[0]
    if new.W1 is not None:
        new.W1 = new.W1 - params.learning_rate * steps[1]
    return new


def predict_accuracy(
    params: ParamSet, adj: NormalizedAdjacency, X: np.ndarray, labels: np.ndarray, mask
) -> float:
    """Micro accuracy of argmax predictions over the masked nodes."""
    ids = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
    logits = forward(params, adj, X)
    return float((logits[ids].argmax(axis=1) == labels[ids]).mean())


# -- finite-difference oracle -------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]

    @property
    def overall(self) -> float:
        return max(self.max_rel_err.values())


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    # Coordinates where both sides are below the finite-difference resolution
    # floor are treated as agreeing; a ratio of pure roundoff noise is not
    # evidence of a wrong gradient.
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(denom < floor, 0.0, err / np.where(denom < floor, 1.0, denom))
    return float(rel.max()) if rel.size else 0.0


def _renormalized(adj: NormalizedAdjacency, i: int, j: int, value: float) -> NormalizedAdjacency:
    """Rebuild the normalization with raw entry (i, j) = (j, i) set to ``value``.

    Dense, independent reconstruction used only by the oracle.
    """
    n = adj.num_nodes
    a = np.zeros((n, n))
    for k, l in adj.edge_list():
        a[k, l] = a[l, k] = 1.0
    a[i, j] = a[j, i] = value
    a_tilde = a + np.eye(n)
    d = a_tilde.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    m = sp.csr_matrix(inv[:, None] * a_tilde * inv[None, :])
    return NormalizedAdjacency(matrix=m, degrees=d)


def check_gradients(
    params: ParamSet,
    adj: NormalizedAdjacency,
    X: np.ndarray,
    labels: np.ndarray,
    node_set,
    epsilon: float = 1e-4,
    objective: str = "masked_ce",
) -> GradCheckReport:
    """Central-difference check of every gradient the engine produces.

    Perturbs each weight entry, each feature entry, and each existing
    undirected adjacency entry (renormalizing, so degree dependence is
    exercised) and compares against ``backward``. Intended for graphs of at
    most a few dozen nodes; cost is two forward passes per coordinate.
    """
    if adj.num_nodes > 64:
        raise ValueError("finite-difference oracle is limited to graphs of <= 64 nodes")
    node_set = np.asarray(node_set, dtype=np.int64)
    loss_of = masked_ce_loss if objective == "masked_ce" else attack_loss

    bundle = backward(
        params, adj, X, labels, node_set, want_dA=True, want_dX=True, objective=objective
    )

    def loss_at(p: ParamSet, a: NormalizedAdjacency, x: np.ndarray) -> float:
        return loss_of(forward(p, a, x), labels, node_set)

    def fd_tensor(base: np.ndarray, setter) -> np.ndarray:
        out = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = base[idx]
            base[idx] = orig + epsilon
            hi = setter()
            base[idx] = orig - epsilon
            lo = setter()
            base[idx] = orig
            out[idx] = (hi - lo) / (2 * epsilon)
            it.iternext()
        return out

    report: dict[str, float] = {}
    p = params.copy()
    report["W0"] = _rel_err(bundle.dW0, fd_tensor(p.W0, lambda: loss_at(p, adj, X)))
    if p.W1 is not None:
        report["W1"] = _rel_err(bundle.dW1, fd_tensor(p.W1, lambda: loss_at(p, adj, X)))
    Xw = X.copy()
    report["X"] = _rel_err(bundle.dX, fd_tensor(Xw, lambda: loss_at(params, adj, Xw)))

    edges = adj.edge_list()
    analytic = np.array([bundle.dA[i, j] for i, j in edges]) if len(edges) else np.zeros(0)
    numeric = np.zeros(len(edges))
    for e, (i, j) in enumerate(edges):
        hi = loss_at(params, _renormalized(adj, i, j, 1.0 + epsilon), X)
        lo = loss_at(params, _renormalized(adj, i, j, 1.0 - epsilon), X)
        numeric[e] = (hi - lo) / (2 * epsilon)
    report["A"] = _rel_err(analytic, numeric)
    return GradCheckReport(max_rel_err=report)
