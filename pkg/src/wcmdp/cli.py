"""Command-line entry points.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from wcmdp import envs, harness
from wcmdp.core import SpecCache
from wcmdp.exact import (
    _JOINT_SIZE_CAP,
    default_lambda_grid,
    lagrangian_bound,
    value_iteration,
)


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if cfg.out_dir is None:
        raise harness.ConfigError("no output directory (use --out or the "
                                  "'out' config key)")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _build_for(cfg: harness.ExperimentConfig):
    rng = np.random.default_rng(harness.derive_seed(cfg.master_seed, 0,
                                                    "env"))
    return envs.build_env(cfg.env_id, overrides=cfg.env_overrides, rng=rng)


def cmd_solve_exact(args) -> int:
    cfg = _load(args)
    build = _build_for(cfg)
    spec = build.spec
    if spec.n_states * spec.n_actions > _JOINT_SIZE_CAP:
        raise RuntimeError(
            f"joint problem too large for the exact solver "
            f"({spec.n_states} x {spec.n_actions} state-action pairs)")
    result = value_iteration(spec)
    path = os.path.join(cfg.out_dir, "v_star.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("state", "value"))
        for s, v in enumerate(result.v):
            writer.writerow((s, repr(float(v))))
    harness.emit_manifest(
        {"env": cfg.env_id, "iterations": result.iterations,
         "residual": repr(float(result.residuals[-1])),
         "n_states": spec.n_states, "n_actions": spec.n_actions},
        os.path.join(cfg.out_dir, "solve_manifest.txt"))
    print(f"wrote {path} ({spec.n_states} states, "
          f"{result.iterations} iterations)")
    return 0


def cmd_bounds(args) -> int:
    cfg = _load(args)
    build = _build_for(cfg)
    spec = build.spec
    grid = default_lambda_grid(spec.n_constraints, cfg.lambda_max,
                               cfg.lambda_points)
    cache = SpecCache(spec)
    best, argmin, _tables = lagrangian_bound(spec, grid)
    mask = cache.feasibility_mask
    v_bound = np.where(mask, best.values, -np.inf).max(axis=1)
    path = os.path.join(cfg.out_dir, "bounds.csv")
    have_exact = spec.n_states * spec.n_actions <= _JOINT_SIZE_CAP
    v_star = value_iteration(spec).v if have_exact else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("state", "v_bound", "v_star", "gap"))
        for s in range(spec.n_states):
            if v_star is None:
                writer.writerow((s, repr(float(v_bound[s])), "", ""))
            else:
                writer.writerow((s, repr(float(v_bound[s])),
                                 repr(float(v_star[s])),
                                 repr(float(v_bound[s] - v_star[s]))))
    del argmin
    print(f"wrote {path} (grid of {len(grid)} multipliers)")
    return 0


def _run_and_report(cfg: harness.ExperimentConfig) -> int:
    artifacts = harness.run_experiment(cfg)
    aggs = harness.aggregate(artifacts.rows, window=cfg.smoothing_window)
    harness.emit_plots(aggs, cfg.out_dir, metric="return")
    err_aggs = harness.aggregate(artifacts.rows, window=cfg.smoothing_window,
                                 metric="rel_error")
    if err_aggs:
        harness.emit_plots(err_aggs, cfg.out_dir, metric="rel_error")
    print(f"wrote {artifacts.metrics_path} ({len(artifacts.rows)} rows)")
    return 0


def cmd_train_tabular(args) -> int:
    cfg = _load(args)
    if cfg.algo not in harness.TABULAR_ALGOS:
        raise harness.ConfigError(
            f"train-tabular requires a tabular algorithm, got {cfg.algo!r}")
    return _run_and_report(cfg)


def cmd_train_neural(args) -> int:
    cfg = _load(args)
    if cfg.algo not in harness.NEURAL_ALGOS:
        raise harness.ConfigError(
            f"train-neural requires a neural algorithm, got {cfg.algo!r}")
    return _run_and_report(cfg)


def cmd_sensitivity(args) -> int:
    cfg = _load(args)
    if cfg.env_id != "ev":
        raise harness.ConfigError(
            "the sensitivity study varies the number of charging spots and "
            "needs env = ev")
    n_values = tuple(int(v) for v in args.sizes.split(","))
    rows = harness.sensitivity_study(cfg, n_values=n_values)
    path = os.path.join(cfg.out_dir, "sensitivity.csv")
    harness.write_sensitivity_csv(rows, path)
    for row in rows:
        print(f"N={row.n}: baseline {row.baseline_return:.3f}, "
              f"candidate {row.candidate_return:.3f}, "
              f"improvement {row.pct_improvement:+.1f}%")
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise RuntimeError(f"no metrics file at {metrics_path}; run a "
                           "training command first")
    rows = harness.read_metrics_csv(metrics_path)
    for metric in ("return", "rel_error"):
        aggs = harness.aggregate(rows, window=cfg.smoothing_window,
                                 metric=metric)
        if aggs:
            csv_path, svg_path = harness.emit_plots(aggs, cfg.out_dir,
                                                    metric=metric)
            print(f"wrote {csv_path} and {svg_path}")
    return 0


_COMMANDS = {
    "solve-exact": cmd_solve_exact,
    "train-tabular": cmd_train_tabular,
    "train-neural": cmd_train_neural,
    "bounds": cmd_bounds,
    "sensitivity": cmd_sensitivity,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wcmdp",
        description="Weakly coupled MDP solvers and learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="max concurrent replications")
        if name == "sensitivity":
            p.add_argument("--sizes", default="2,3,4,5",
                           help="comma-separated subproblem counts")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
