"""distpoison: poisoning attacks on simulated distributed GNN training."""

from distpoison.attack import (
    AttackConfig,
    PerturbationSet,
    ScoreMatrix,
    baseline_dice,
    baseline_random,
    combined_subgraph_gradient,
    communication_matrix,
    edge_scores,
    flip_features,
    run_disttack,
    select_edge_removals,
    select_targets,
    train_surrogate,
)
from distpoison.distributed import (
    SyncRecord,
    WorkerState,
    aggregate_gradients,
    gradient_norm_divergence,
    train_distributed,
)
from distpoison.gnn import (
    GradientBundle,
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
from distpoison.graph import (
    Graph,
    NormalizedAdjacency,
    Partition,
    Subgraph,
    build_graph,
    count_cross_edges,
    generate_sbm,
    normalize_adjacency,
    partition_nodes,
    sample_1hop,
)
from distpoison.homophily import (
    HomophilyDistribution,
    distribution_distance,
    homophily_distribution,
    homophily_values,
    node_homophily,
    stealth_penalty,
)

__version__ = "0.1.0"
