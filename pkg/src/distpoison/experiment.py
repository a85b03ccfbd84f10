"""Batch experiment runner: config, paired clean/poisoned runs, emission.

Every run is paired: the clean and attacked trainings share the seed, the
partition, and the initial weights, so the perturbation is the only
difference between the two trajectories. Test accuracy is always evaluated
on the clean graph; poisoning only touches what the victim trains on.

The scaling benchmark times the per-iteration attack work (subgraph
sampling, gradient scoring, selection, application) under a fixed surrogate
and fits it against subgraph_nodes * (subgraph_edges * avg_degree +
feature_dim); surrogate training time is reported separately and the stealth
term is disabled, since neither is part of the per-iteration cost model.
"""

from __future__ import annotations

import json
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import distpoison
from distpoison.attack import (
    AttackConfig,
    PerturbationSet,
    baseline_dice,
    baseline_random,
    combined_subgraph_gradient,
    edge_scores,
    run_disttack,
    select_edge_removals,
    select_targets,
    train_surrogate,
)
from distpoison.distributed import (
    gradient_norm_divergence,
    train_distributed,
    write_divergence_csv,
    write_telemetry_csv,
)
from distpoison.gnn import ParamSet, predict_accuracy
from distpoison.graph import (
    Graph,
    generate_sbm,
    normalize_adjacency,
    partition_nodes,
    sample_1hop,
)
from distpoison.homophily import distribution_distance, homophily_values, write_histogram_csv
from distpoison.io import load_graph

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunResult",
    "run_experiment",
    "scaling_benchmark",
    "emit_results",
    "load_summary",
    "replay_perturbation",
]

ATTACK_KINDS = ("none", "disttack", "ra", "dice")
MODELS = ("gcn", "sgc")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists offending fields."""


@dataclass
class ExperimentConfig:
    dataset: dict
    attack: dict
    seeds: list[int]
    model: str = "gcn"
    hidden_dim: int = 16
    sgc_k: int = 2
    workers: int = 4
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 0.3
    aggregation: str = "mean"
    partition_strategy: str = "round_robin"
    poisoned_worker: int = 0
    parallel_seeds: int = 1
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "attack": dict(self.attack),
            "seeds": list(self.seeds),
            "model": self.model,
            "hidden_dim": self.hidden_dim,
            "sgc_k": self.sgc_k,
            "workers": self.workers,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "aggregation": self.aggregation,
            "partition_strategy": self.partition_strategy,
            "poisoned_worker": self.poisoned_worker,
            "parallel_seeds": self.parallel_seeds,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        errors = []
        known = set(cls.__dataclass_fields__)
        for key in raw:
            if key not in known:
                errors.append(f"{key}: unknown field")
        dataset = raw.get("dataset")
        if not isinstance(dataset, dict):
            errors.append("dataset: required mapping with kind 'sbm' or 'files'")
            dataset = {}
        else:
            kind = dataset.get("kind")
            if kind == "sbm":
                for fld in ("block_sizes", "p_intra", "p_inter", "feature_dim", "noise"):
                    if fld not in dataset:
                        errors.append(f"dataset.{fld}: required for kind 'sbm'")
            elif kind == "files":
                for fld in ("edges", "features", "splits"):
                    if fld not in dataset:
                        errors.append(f"dataset.{fld}: required for kind 'files'")
            else:
                errors.append(f"dataset.kind: must be 'sbm' or 'files', got {kind!r}")
        attack = raw.get("attack", {"kind": "none"})
        if not isinstance(attack, dict) or attack.get("kind") not in ATTACK_KINDS:
            errors.append(f"attack.kind: must be one of {ATTACK_KINDS}")
            attack = {"kind": "none"}
        elif attack["kind"] != "none":
            for fld in ("edge_budget", "feature_budget"):
                if attack.get(fld, 0) < 0:
                    errors.append(f"attack.{fld}: must be nonnegative")
        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) for s in seeds
        ):
            errors.append("seeds: must be a nonempty list of integers")
            seeds = [0]
        model = raw.get("model", "gcn")
        if model not in MODELS:
            errors.append(f"model: must be one of {MODELS}, got {model!r}")
        for fld, low in (("workers", 1), ("epochs", 0), ("batch_size", 1), ("hidden_dim", 1)):
            val = raw.get(fld, 1)
            if not isinstance(val, int) or val < low:
                errors.append(f"{fld}: must be an integer >= {low}")
        if raw.get("aggregation", "mean") not in ("mean", "sum"):
            errors.append("aggregation: must be 'mean' or 'sum'")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        kwargs = {k: raw[k] for k in known if k in raw}
        kwargs["dataset"] = dataset
        kwargs["attack"] = attack
        kwargs["seeds"] = seeds
        return cls(**kwargs)


@dataclass
class RunResult:
    seed: int
    acc_clean: float
    acc_attacked: float
    accuracy_drop: float
    divergence: list[float]
    homophily_distance: float
    attack_seconds: float
    edges_removed: int
    edges_added: int
    features_flipped: int
    records_clean: list = field(default_factory=list, repr=False)
    records_poisoned: list = field(default_factory=list, repr=False)
    perturbation: PerturbationSet | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "acc_clean": self.acc_clean,
            "acc_attacked": self.acc_attacked,
            "accuracy_drop": self.accuracy_drop,
            "divergence": list(self.divergence),
            "homophily_distance": self.homophily_distance,
            "attack_seconds": self.attack_seconds,
            "edges_removed": self.edges_removed,
            "edges_added": self.edges_added,
            "features_flipped": self.features_flipped,
        }


def build_dataset(cfg: ExperimentConfig, seed: int) -> Graph:
    ds = cfg.dataset
    if ds["kind"] == "sbm":
        return generate_sbm(
            seed,
            ds["block_sizes"],
            ds["p_intra"],
            ds["p_inter"],
            feature_dim=ds["feature_dim"],
            noise=ds["noise"],
            train_frac=ds.get("train_frac", 0.3),
            val_frac=ds.get("val_frac", 0.2),
        )
    return load_graph(ds["edges"], ds["features"], ds["splits"])


def _init_params(cfg: ExperimentConfig, g: Graph, seed: int) -> ParamSet:
    if cfg.model == "gcn":
        return ParamSet.init_gcn(
            g.feature_dim, cfg.hidden_dim, g.num_classes,
            seed=seed, learning_rate=cfg.learning_rate,
        )
    return ParamSet.init_sgc(
        g.feature_dim, g.num_classes, seed=seed,
        learning_rate=cfg.learning_rate, k=cfg.sgc_k,
    )


def _attack_config(cfg: ExperimentConfig, g: Graph, seed: int) -> AttackConfig:
    a = dict(cfg.attack)
    a.pop("kind", None)
    frac = a.pop("edge_budget_frac", None)
    if frac is not None:
        a["edge_budget"] = int(round(frac * g.num_edges))
    a.setdefault("edge_budget", 0)
    a.setdefault("feature_budget", 0)
    a["seed"] = seed
    return AttackConfig(**a)


def build_attack(cfg: ExperimentConfig, g: Graph, part, seed: int) -> PerturbationSet:
    kind = cfg.attack.get("kind", "none")
    if kind == "none":
        return PerturbationSet(config={"kind": "none"})
    acfg = _attack_config(cfg, g, seed)
    if kind == "disttack":
        targets = select_targets(
            g, part, cfg.poisoned_worker, acfg.target_count, rule=acfg.target_rule
        )
        return run_disttack(g, part, acfg, targets)
    if kind == "ra":
        return baseline_random(
            g, part, acfg.edge_budget, acfg.feature_budget, seed,
            poisoned_worker=cfg.poisoned_worker,
        )
    return baseline_dice(
        g, part, acfg.edge_budget, seed, poisoned_worker=cfg.poisoned_worker
    )


def run_single_seed(cfg: ExperimentConfig, seed: int) -> RunResult:
    g = build_dataset(cfg, seed)
    part = partition_nodes(g, cfg.workers, cfg.partition_strategy, seed=seed)
    params0 = _init_params(cfg, g, seed)

    t0 = time.perf_counter()
    pert = build_attack(cfg, g, part, seed)
    attack_seconds = time.perf_counter() - t0

    common = dict(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
                  aggregation=cfg.aggregation)
    final_clean, rec_clean = train_distributed(g, part, params0, **common)
    final_poisoned, rec_poisoned = train_distributed(
        g, part, params0, poison=pert, poisoned_worker=cfg.poisoned_worker, **common
    )

    adj = normalize_adjacency(g)
    acc_clean = predict_accuracy(final_clean, adj, g.features, g.labels, g.test_mask)
    acc_attacked = predict_accuracy(final_poisoned, adj, g.features, g.labels, g.test_mask)

    divergence = gradient_norm_divergence(rec_poisoned, cfg.poisoned_worker)
    g_pert = pert.apply_to(g)
    homo_dist = distribution_distance(homophily_values(g), homophily_values(g_pert))

    return RunResult(
        seed=seed,
        acc_clean=acc_clean,
        acc_attacked=acc_attacked,
        accuracy_drop=acc_clean - acc_attacked,
        divergence=[float(d) for d in divergence],
        homophily_distance=float(homo_dist),
        attack_seconds=attack_seconds,
        edges_removed=len(pert.edges_removed),
        edges_added=len(pert.edges_added),
        features_flipped=len(pert.features_flipped),
        records_clean=rec_clean,
        records_poisoned=rec_poisoned,
        perturbation=pert,
    )


def run_experiment(cfg: ExperimentConfig) -> list[RunResult]:
    """One paired clean/attacked run per seed."""
    if cfg.parallel_seeds > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_seeds) as pool:
            return list(pool.map(lambda s: run_single_seed(cfg, s), cfg.seeds))
    return [run_single_seed(cfg, s) for s in cfg.seeds]


# -- runtime scaling ----------------------------------------------------------


def _timed_attack_iterations(g, part, acfg: AttackConfig, targets, iterations: int):
    """Per-iteration selection cost under a fixed surrogate, with subgraph stats."""
    g_cur = g.copy()
    theta = train_surrogate(
        g_cur, acfg.surrogate_epochs, acfg.seed,
        hidden_dim=acfg.surrogate_hidden, learning_rate=acfg.surrogate_lr,
    )
    times, sub_nodes, sub_edges = [], [], []
    flipped = set()
    for _ in range(iterations):
        t0 = time.perf_counter()
        edge_cands = {}
        feat_grads = {}
        for t in targets:
            sub = sample_1hop(g_cur, t)
            sub_nodes.append(sub.num_nodes)
            sub_edges.append(len(sub.edges))
            eg, fg = combined_subgraph_gradient(theta, sub, acfg)
            for key, s in edge_scores(eg, sub, part, acfg.lambda_comm).global_items().items():
                edge_cands[key] = edge_cands.get(key, 0.0) + s
            for local, node in enumerate(sub.node_ids):
                node = int(node)
                feat_grads[node] = feat_grads.get(node, 0.0) + fg[local]
        for i, j, _ in select_edge_removals(edge_cands, acfg.edges_per_iter):
            g_cur.remove_edge(i, j)
        cands = sorted(
            (
                (-abs(grow[dim]), node, dim)
                for node, grow in feat_grads.items()
                for dim in range(len(grow))
                if grow[dim] != 0.0 and (node, dim) not in flipped
            ),
        )[: acfg.flips_per_iter]
        for _, node, dim in cands:
            g_cur.set_feature(node, dim, -g_cur.features[node, dim])
            flipped.add((node, dim))
        times.append(time.perf_counter() - t0)
    return times, float(np.mean(sub_nodes)), float(np.mean(sub_edges))


def scaling_benchmark(
    base: ExperimentConfig, size_multipliers, iterations: int = 12
) -> dict:
    """Attack time per iteration across growing graphs, with a cost-model fit.

    Returns a table of per-size rows and the least-squares fit of time
    against nodes * (edges * avg_degree + feature_dim), all measured on the
    sampled subgraphs.
    """
    if len(size_multipliers) < 3:
        raise ConfigError("scaling benchmark needs at least 3 sizes")
    ds = base.dataset
    if ds.get("kind") != "sbm":
        raise ConfigError("scaling benchmark generates its graphs; dataset.kind must be 'sbm'")
    seed = base.seeds[0]
    rows = []
    for mult in size_multipliers:
        blocks = [b * mult for b in ds["block_sizes"]]
        fdim = ds["feature_dim"] * mult
        g = generate_sbm(seed, blocks, ds["p_intra"], ds["p_inter"],
                         feature_dim=fdim, noise=ds["noise"])
        part = partition_nodes(g, base.workers, base.partition_strategy, seed=seed)
        acfg = _attack_config(base, g, seed)
        acfg.lambda_homo = 0.0  # stealth term is outside the cost model
        targets = select_targets(g, part, base.poisoned_worker, acfg.target_count)
        t_surr0 = time.perf_counter()
        times, n_sub, e_sub = _timed_attack_iterations(g, part, acfg, targets, iterations)
        total = time.perf_counter() - t_surr0
        attack_s = float(np.mean(times))
        d_sub = 2.0 * e_sub / n_sub if n_sub else 0.0
        rows.append(
            {
                "multiplier": mult,
                "graph_nodes": g.num_nodes,
                "graph_edges": g.num_edges,
                "nodes": n_sub,
                "edges": e_sub,
                "avg_degree": d_sub,
                "feature_dim": fdim,
                "attack_seconds": attack_s,
                "surrogate_seconds": total - sum(times),
            }
        )
    x = np.array([r["nodes"] * (r["edges"] * r["avg_degree"] + r["feature_dim"]) for r in rows])
    y = np.array([r["attack_seconds"] for r in rows])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {
        "rows": rows,
        "fit": {"slope": float(slope), "intercept": float(intercept), "r2": float(r2)},
        "cost_model": "nodes * (edges * avg_degree + feature_dim)",
    }


# -- emission -----------------------------------------------------------------


def _code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return f"{distpoison.__version__}+g{out.stdout.strip()}"
    except OSError:
        pass
    return distpoison.__version__


def emit_results(
    results: list[RunResult],
    out_dir,
    cfg: ExperimentConfig | None = None,
    force: bool = False,
) -> list[Path]:
    """Write summary.json plus per-run telemetry, histograms, perturbations.

    Refuses to overwrite an out_dir that already holds a summary.json unless
    ``force`` is set.
    """
    out = Path(out_dir)
    summary_path = out / "summary.json"
    if summary_path.exists() and not force:
        raise FileExistsError(f"{summary_path} exists; pass force=True (--force) to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = {
        "config": cfg.to_dict() if cfg is not None else None,
        "code_version": _code_version(),
        "runs": [r.to_dict() for r in results],
    }
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2)
    written.append(summary_path)
    poisoned = None if cfg is None else cfg.poisoned_worker
    for r in results:
        tag = f"seed{r.seed}"
        if r.records_clean:
            p = out / f"grad_clean_{tag}.csv"
            write_telemetry_csv(r.records_clean, None, p)
            written.append(p)
        if r.records_poisoned:
            p = out / f"grad_poisoned_{tag}.csv"
            write_telemetry_csv(r.records_poisoned, poisoned, p)
            written.append(p)
            if len(r.records_poisoned[0].worker_norms) >= 2 and poisoned is not None:
                p = out / f"divergence_{tag}.csv"
                write_divergence_csv(r.records_poisoned, poisoned, p)
                written.append(p)
        if r.perturbation is not None:
            p = out / f"perturbation_{tag}.json"
            r.perturbation.save(p)
            written.append(p)
    return written


def emit_histograms(cfg: ExperimentConfig, results: list[RunResult], out_dir) -> list[Path]:
    """Clean-vs-perturbed homophily histograms, one CSV per seed."""
    out = Path(out_dir)
    written = []
    for r in results:
        if r.perturbation is None:
            continue
        g = build_dataset(cfg, r.seed)
        gp = r.perturbation.apply_to(g)
        p = out / f"homophily_hist_seed{r.seed}.csv"
        write_histogram_csv(homophily_values(g), homophily_values(gp), p)
        written.append(p)
    return written


def load_summary(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def replay_perturbation(cfg: ExperimentConfig, pert: PerturbationSet, seed: int) -> RunResult:
    """Apply a stored perturbation to a fresh paired training run."""
    g = build_dataset(cfg, seed)
    part = partition_nodes(g, cfg.workers, cfg.partition_strategy, seed=seed)
    params0 = _init_params(cfg, g, seed)
    common = dict(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
                  aggregation=cfg.aggregation)
    final_clean, rec_clean = train_distributed(g, part, params0, **common)
    final_poisoned, rec_poisoned = train_distributed(
        g, part, params0, poison=pert, poisoned_worker=cfg.poisoned_worker, **common
    )
    adj = normalize_adjacency(g)
    acc_clean = predict_accuracy(final_clean, adj, g.features, g.labels, g.test_mask)
    acc_attacked = predict_accuracy(final_poisoned, adj, g.features, g.labels, g.test_mask)
    g_pert = pert.apply_to(g)
    return RunResult(
        seed=seed,
        acc_clean=acc_clean,
        acc_attacked=acc_attacked,
        accuracy_drop=acc_clean - acc_attacked,
        divergence=[float(d) for d in gradient_norm_divergence(rec_poisoned, cfg.poisoned_worker)],
        homophily_distance=float(
            distribution_distance(homophily_values(g), homophily_values(g_pert))
        ),
        attack_seconds=0.0,
        edges_removed=len(pert.edges_removed),
        edges_added=len(pert.edges_added),
        features_flipped=len(pert.features_flipped),
        records_clean=rec_clean,
        records_poisoned=rec_poisoned,
        perturbation=pert,
    )
