"""Command-line entry point: run experiments, benchmark, replay, gradcheck.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from distpoison.attack import PerturbationSet
from distpoison.experiment import (
    ConfigError,
    ExperimentConfig,
    emit_histograms,
    emit_results,
    replay_perturbation,
    run_experiment,
    scaling_benchmark,
)
from distpoison.gnn import ParamSet, check_gradients
from distpoison.graph import generate_sbm, normalize_adjacency


def _apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw_val = item.split("=", 1)
        value = yaml.safe_load(raw_val)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a mapping")
        node[parts[-1]] = value
    return cfg


def load_config(path, overrides) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw = _apply_overrides(raw, overrides or [])
    return ExperimentConfig.from_dict(raw)


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg.out_dir = args.out
    results = run_experiment(cfg)
    for r in results:
        print(
            f"seed {r.seed}: clean {r.acc_clean:.4f} attacked {r.acc_attacked:.4f} "
            f"drop {r.accuracy_drop:+.4f} "
            f"(removed {r.edges_removed}, added {r.edges_added}, flips {r.features_flipped}, "
            f"attack {r.attack_seconds:.2f}s)"
        )
    drops = [r.accuracy_drop for r in results]
    print(f"mean drop over {len(results)} seed(s): {np.mean(drops):+.4f}")
    if cfg.out_dir:
        written = emit_results(results, cfg.out_dir, cfg, force=args.force)
        written += emit_histograms(cfg, results, cfg.out_dir)
        print(f"wrote {len(written)} files to {cfg.out_dir}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    sizes = [int(s) for s in args.sizes.split(",")]
    table = scaling_benchmark(cfg, sizes, iterations=args.iterations)
    header = f"{'mult':>5} {'graphN':>7} {'graphE':>7} {'N':>8} {'|A|':>8} {'d':>7} {'M':>5} {'sec/iter':>10}"
    print(header)
    for row in table["rows"]:
        print(
            f"{row['multiplier']:>5} {row['graph_nodes']:>7} {row['graph_edges']:>7} "
            f"{row['nodes']:>8.1f} {row['edges']:>8.1f} {row['avg_degree']:>7.2f} "
            f"{row['feature_dim']:>5} {row['attack_seconds']:>10.6f}"
        )
    fit = table["fit"]
    print(f"fit vs {table['cost_model']}: R^2 = {fit['r2']:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(table, fh, indent=2)
        print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    cfg = load_config(args.config, args.set)
    pert = PerturbationSet.load(args.perturbation)
    r = replay_perturbation(cfg, pert, seed=args.seed)
    print(
        f"replayed {pert.size} perturbation(s): clean {r.acc_clean:.4f} "
        f"attacked {r.acc_attacked:.4f} drop {r.accuracy_drop:+.4f}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    blocks = [args.nodes // 3, args.nodes // 3, args.nodes - 2 * (args.nodes // 3)]
    g = generate_sbm(args.seed, blocks, 0.35, 0.2, feature_dim=args.features, noise=0.4)
    adj = normalize_adjacency(g)
    params = ParamSet.init_gcn(g.feature_dim, args.hidden, g.num_classes, seed=args.seed)
    node_set = np.flatnonzero(g.train_mask)
    if len(node_set) == 0:
        node_set = np.arange(g.num_nodes)
    t0 = time.perf_counter()
    report = check_gradients(params, adj, g.features, g.labels, node_set, epsilon=args.epsilon)
    elapsed = time.perf_counter() - t0
    for name in ("W0", "W1", "X", "A"):
        if name in report.max_rel_err:
            print(f"d{name}: max relative error {report.max_rel_err[name]:.3e}")
    status = "OK" if report.overall < args.threshold else "FAIL"
    print(f"overall {report.overall:.3e} (threshold {args.threshold:g}) "
          f"in {elapsed:.2f}s: {status}")
    return 0 if status == "OK" else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distpoison",
        description="Poisoning attacks on simulated distributed GNN training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured experiment over its seeds")
    run.add_argument("--config", required=True, help="YAML experiment config")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config field (dotted keys)")
    run.add_argument("--out", help="output directory (overrides config out_dir)")
    run.add_argument("--force", action="store_true",
                     help="overwrite an existing output directory")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="runtime scaling benchmark")
    bench.add_argument("--config", required=True)
    bench.add_argument("--set", action="append", metavar="KEY=VALUE")
    bench.add_argument("--sizes", default="1,2,4,8",
                       help="comma-separated size multipliers (need >= 3)")
    bench.add_argument("--iterations", type=int, default=12)
    bench.add_argument("--out", help="write the table as JSON here")
    bench.set_defaults(func=cmd_bench)

    replay = sub.add_parser("replay", help="apply a stored perturbation to a fresh run")
    replay.add_argument("--config", required=True)
    replay.add_argument("--set", action="append", metavar="KEY=VALUE")
    replay.add_argument("--perturbation", required=True, help="perturbation JSON")
    replay.add_argument("--seed", type=int, default=0)
    replay.set_defaults(func=cmd_replay)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    grad.add_argument("--nodes", type=int, default=12)
    grad.add_argument("--hidden", type=int, default=8)
    grad.add_argument("--features", type=int, default=6)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--epsilon", type=float, default=1e-4)
    grad.add_argument("--threshold", type=float, default=1e-4)
    grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
