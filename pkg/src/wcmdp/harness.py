"""Experiment orchestration: configs, seeding, replication, metrics,
CSV/plot emission.

The CSV metric file is the single source of truth for results; plots are
derived artifacts. Runs are deterministic: (config, master seed) fixes
every byte of the metrics CSV. Wall-clock timing is therefore off by
default and only recorded when explicitly requested.
"""

from __future__ import annotations

import ast
import configparser
import csv
import hashlib
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from wcmdp import envs, neural
from wcmdp.core import SpecCache, WcmdpError, sample_step
from wcmdp.exact import (
    _JOINT_SIZE_CAP,
    default_lambda_grid,
    value_iteration,
)
from wcmdp.tabular import (
    DoubleQlAgent,
    LagrangeQlAgent,
    QlAgent,
    StepSchedule,
    WcqlAgent,
)

TABULAR_ALGOS = ("ql", "double_ql", "lagrange_ql", "wcql")
NEURAL_ALGOS = ("dqn", "double_dqn", "wcdqn")
ALGOS = TABULAR_ALGOS + NEURAL_ALGOS

CSV_HEADER = ("algo", "env", "seed", "episode", "return", "rel_error",
              "wall_ms")


class ConfigError(WcmdpError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# Seeding.


def derive_seed(master: int, index: int, tag: str) -> int:
    """Stable hash-based stream splitting.

    The scheme (sha256 of "master:index:tag", first 8 bytes big-endian,
    reduced mod 2**63) is frozen; changing it is a breaking change to
    every recorded run.
    """
    digest = hashlib.sha256(f"{master}:{index}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


# ---------------------------------------------------------------------------
# Configuration.


@dataclass
class ExperimentConfig:
    env_id: str = "ev"
    algo: str = "wcql"
    episodes: int = 6000
    episode_length: int | None = None
    replications: int = 5
    master_seed: int = 0
    jobs: int = 1
    smoothing_window: int = 100
    discounted: bool = False
    record_wall_time: bool = False
    out_dir: str | None = None
    env_overrides: dict = field(default_factory=dict)
    alpha_exponent: float = 0.4
    beta_exponent: float = 0.4
    eta_exponent: float = 0.6
    explore_exponent: float = 0.4
    projection: str = "async"
    lambda_max: float = 10.0
    lambda_points: int = 41
    neural_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env_id not in envs.ENV_IDS:
            raise ConfigError(f"unknown env: {self.env_id!r}")
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algorithm: {self.algo!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.episode_length is None:
            self.episode_length = envs.EPISODE_LENGTHS[self.env_id]

    def config_hash(self) -> str:
        payload = repr(sorted(asdict(self).items()))
        return hashlib.sha256(payload.encode()).hexdigest()

    def neural_config(self) -> neural.WcdqnConfig:
        base = neural.WcdqnConfig(eta_exponent=self.eta_exponent,
                                  lambda_max=self.lambda_max,
                                  lambda_points=self.lambda_points)
        return replace(base, **self.neural_overrides)


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def load_config(path) -> ExperimentConfig:
    """Read an INI-style experiment config.

    Sections: [experiment] (run-level keys), [env] (environment parameter
    overrides), [schedules], [lambda], [neural]. All are optional; any
    missing key keeps its default.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    kwargs: dict = {}

    def take(section, key, dest=None, cast=_parse_value):
        if parser.has_option(section, key):
            kwargs[dest or key] = cast(parser.get(section, key))

    take("experiment", "env", "env_id", str)
    take("experiment", "algo", "algo", str)
    for key in ("episodes", "episode_length", "replications", "jobs",
                "smoothing_window", "lambda_points"):
        take("experiment", key, key, int)
    take("experiment", "seed", "master_seed", int)
    for key in ("discounted", "record_wall_time"):
        if parser.has_option("experiment", key):
            kwargs[key] = parser.getboolean("experiment", key)
    take("experiment", "out", "out_dir", str)
    if parser.has_section("env"):
        kwargs["env_overrides"] = {k: _parse_value(v)
                                   for k, v in parser.items("env")}
    if parser.has_section("schedules"):
        for key in ("alpha_exponent", "beta_exponent", "eta_exponent",
                    "explore_exponent"):
            take("schedules", key, key, float)
        take("schedules", "projection", "projection", str)
    if parser.has_section("lambda"):
        take("lambda", "max", "lambda_max", float)
        take("lambda", "points", "lambda_points", int)
    if parser.has_section("neural"):
        kwargs["neural_overrides"] = {k: _parse_value(v)
                                      for k, v in parser.items("neural")}
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Metric rows.


@dataclass
class MetricRow:
    algo: str
    env: str
    seed: int
    episode: int
    ret: float
    rel_error: float | None = None
    wall_ms: float | None = None

    def to_csv(self) -> tuple:
        return (self.algo, self.env, self.seed, self.episode,
                repr(float(self.ret)),
                "" if self.rel_error is None else repr(float(self.rel_error)),
                "" if self.wall_ms is None else repr(float(self.wall_ms)))


def relative_error(v_n: np.ndarray, v_star: np.ndarray) -> float:
    """||V_n - V*||_2 / ||V*||_2."""
    v_n = np.asarray(v_n, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    if v_n.shape != v_star.shape:
        raise ValueError("value vectors differ in length")
    denom = np.linalg.norm(v_star)
    if denom == 0.0:
        raise ValueError("reference value function has zero norm")
    return float(np.linalg.norm(v_n - v_star) / denom)


# ---------------------------------------------------------------------------
# Replication runners.


def _make_tabular_agent(cfg: ExperimentConfig, spec, cache, init_rng):
    alpha = StepSchedule(exponent=cfg.alpha_exponent)
    beta = StepSchedule(exponent=cfg.beta_exponent)
    eta = StepSchedule(exponent=cfg.eta_exponent)
    grid = default_lambda_grid(spec.n_constraints, cfg.lambda_max,
                               cfg.lambda_points)
    if cfg.algo == "ql":
        return QlAgent(spec, cache, init_rng, alpha=alpha,
                       explore_exponent=cfg.explore_exponent)
    if cfg.algo == "double_ql":
        return DoubleQlAgent(spec, cache, init_rng, alpha=alpha,
                             explore_exponent=cfg.explore_exponent)
    if cfg.algo == "lagrange_ql":
        return LagrangeQlAgent(spec, cache, grid, init_rng, beta=beta,
                               eta=eta,
                               explore_exponent=cfg.explore_exponent)
    return WcqlAgent(spec, cache, grid, init_rng, alpha=alpha, beta=beta,
                     eta=eta, explore_exponent=cfg.explore_exponent,
                     projection=cfg.projection)


@dataclass
class ReplicationResult:
    rep: int
    rows: list
    sampled: dict


def run_replication(cfg: ExperimentConfig, rep: int) -> ReplicationResult:
    """One independent seeded run: build env, train, emit metric rows."""
    import time

    master = cfg.master_seed
    env_rng = np.random.default_rng(derive_seed(master, rep, "env"))
    build = envs.build_env(cfg.env_id, overrides=cfg.env_overrides,
                           rng=env_rng)
    spec = build.spec
    rep_seed = derive_seed(master, rep, "rep")
    rows: list[MetricRow] = []

    v_star = None
    if (cfg.algo in TABULAR_ALGOS
            and spec.n_states * spec.n_actions <= _JOINT_SIZE_CAP):
        v_star = value_iteration(spec).v

    gamma = spec.discount if cfg.discounted else 1.0
    if cfg.algo in TABULAR_ALGOS:
        cache = SpecCache(spec)
        init_rng = np.random.default_rng(derive_seed(master, rep, "init"))
        behave_rng = np.random.default_rng(derive_seed(master, rep, "behave"))
        agent = _make_tabular_agent(cfg, spec, cache, init_rng)
        if isinstance(agent, DoubleQlAgent):
            agent.update_rng = np.random.default_rng(
                derive_seed(master, rep, "coin"))
        for ep in range(cfg.episodes):
            t0 = time.perf_counter() if cfg.record_wall_time else 0.0
            state = envs.initial_state(build, behave_rng)
            ep_return = 0.0
            for t in range(cfg.episode_length):
                action = agent.select_action(state, behave_rng)
                tau = sample_step(spec, state, action, behave_rng, cache)
                agent.update(tau)
                ep_return += gamma ** t * float(tau.rewards.sum())
                state = tau.next_state
            err = None
            if v_star is not None:
                est = agent.value_estimate()
                if est is not None:
                    err = relative_error(est, v_star)
            wall = ((time.perf_counter() - t0) * 1e3
                    if cfg.record_wall_time else None)
            rows.append(MetricRow(cfg.algo, cfg.env_id, rep_seed, ep,
                                  ep_return, err, wall))
    else:
        t0 = time.perf_counter() if cfg.record_wall_time else 0.0
        result = neural.train_neural(build, cfg.episodes, cfg.episode_length,
                                     cfg.neural_config(), rep_seed,
                                     algo=cfg.algo)
        per_ep = ((time.perf_counter() - t0) * 1e3 / cfg.episodes
                  if cfg.record_wall_time else None)
        for ep, ret in enumerate(result.returns):
            rows.append(MetricRow(cfg.algo, cfg.env_id, rep_seed, ep,
                                  ret, None, per_ep))
    return ReplicationResult(rep=rep, rows=rows, sampled=build.sampled)


def _collect_replications(cfg: ExperimentConfig) -> list[ReplicationResult]:
    reps = range(cfg.replications)
    if cfg.jobs == 1 or cfg.replications == 1:
        results = [run_replication(cfg, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(run_replication, cfg, r) for r in reps]
            results = [f.result() for f in futures]
    # merged in deterministic (replication, episode) order regardless of
    # completion order
    return sorted(results, key=lambda r: r.rep)


@dataclass
class RunArtifacts:
    metrics_path: str
    manifest_path: str
    rows: list


def write_metrics_csv(rows: list[MetricRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.to_csv())


def read_metrics_csv(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise WcmdpError(f"unexpected CSV header: {header}")
        for rec in reader:
            rows.append(MetricRow(
                algo=rec[0], env=rec[1], seed=int(rec[2]),
                episode=int(rec[3]), ret=float(rec[4]),
                rel_error=float(rec[5]) if rec[5] else None,
                wall_ms=float(rec[6]) if rec[6] else None))
    return rows


def _flatten_sampled(prefix: str, sampled: dict, dest: dict) -> None:
    for key, value in sampled.items():
        if isinstance(value, np.ndarray):
            value = value.tolist()
        dest[f"{prefix}.{key}"] = repr(value)


def emit_manifest(entries: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in entries:
            fh.write(f"{key} = {entries[key]}\n")


def parse_manifest(path) -> dict:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition(" = ")
            entries[key] = value
    return entries


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunArtifacts:
    """Run all replications, write metrics.csv and manifest.txt."""
    out_dir = out_dir or cfg.out_dir
    if out_dir is None:
        raise ConfigError("no output directory given")
    os.makedirs(out_dir, exist_ok=True)
    results = _collect_replications(cfg)
    rows = [row for res in results for row in res.rows]

    manifest = {
        "config_hash": cfg.config_hash(),
        "env": cfg.env_id,
        "algo": cfg.algo,
        "episodes": cfg.episodes,
        "episode_length": cfg.episode_length,
        "replications": cfg.replications,
        "master_seed": cfg.master_seed,
    }
    for res in results:
        manifest[f"rep{res.rep}.seed"] = derive_seed(cfg.master_seed,
                                                     res.rep, "rep")
        _flatten_sampled(f"rep{res.rep}", res.sampled, manifest)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    manifest_path = os.path.join(out_dir, "manifest.txt")
    write_metrics_csv(rows, metrics_path)
    emit_manifest(manifest, manifest_path)
    return RunArtifacts(metrics_path=metrics_path,
                        manifest_path=manifest_path, rows=rows)


# ---------------------------------------------------------------------------
# Aggregation and plotting.


@dataclass
class AggregateSeries:
    series: str
    episodes: np.ndarray
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the first window-1 points average what is
    available so the series keeps its length."""
    if window is None or window <= 1:
        return x
    csum = np.concatenate(([0.0], np.cumsum(x)))
    n = len(x)
    hi = np.arange(1, n + 1)
    lo = np.maximum(hi - window, 0)
    return (csum[hi] - csum[lo]) / (hi - lo)


def aggregate(rows: list[MetricRow], window: int | None = None,
              metric: str = "return") -> list[AggregateSeries]:
    """Per-episode mean and normal-approximation 95% CI across
    replications, one series per (env, algo) pair."""
    getter = {"return": lambda r: r.ret,
              "rel_error": lambda r: r.rel_error}[metric]
    groups: dict[tuple, dict[int, dict[int, float]]] = {}
    for row in rows:
        value = getter(row)
        if value is None:
            continue
        by_seed = groups.setdefault((row.env, row.algo), {})
        by_seed.setdefault(row.seed, {})[row.episode] = value
    multi_env = len({key[0] for key in groups}) > 1
    out = []
    for (env_id, algo), by_seed in sorted(groups.items()):
        episodes = sorted(next(iter(by_seed.values())))
        curves = []
        for seed in sorted(by_seed):
            curve = by_seed[seed]
            if sorted(curve) != episodes:
                raise WcmdpError("replications disagree on episode range")
            curves.append(_smooth(np.array([curve[e] for e in episodes]),
                                  window))
        stack = np.vstack(curves)
        k = stack.shape[0]
        mean = stack.mean(axis=0)
        sd = stack.std(axis=0, ddof=1) if k > 1 else np.zeros_like(mean)
        half = 1.96 * sd / np.sqrt(k)
        name = f"{env_id}/{algo}" if multi_env else algo
        out.append(AggregateSeries(series=name,
                                   episodes=np.array(episodes),
                                   mean=mean, ci_lo=mean - half,
                                   ci_hi=mean + half))
    return out


def _svg_polyline(xs, ys, width, height, pad, x_rng, y_rng, color) -> str:
    x0, x1 = x_rng
    y0, y1 = y_rng
    sx = (width - 2 * pad) / max(x1 - x0, 1e-12)
    sy = (height - 2 * pad) / max(y1 - y0, 1e-12)
    pts = " ".join(
        f"{pad + (x - x0) * sx:.2f},{height - pad - (y - y0) * sy:.2f}"
        for x, y in zip(xs, ys))
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{pts}"/>')


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_plots(aggregates: list[AggregateSeries], out_dir,
               metric: str = "return") -> tuple[str, str]:
    """Write the plot-data CSV (the contract) and a best-effort SVG line
    chart with one polyline per series. Returns (csv path, svg path)."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"plot_{metric}.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("series", "episode", "mean", "ci_lo", "ci_hi"))
        for agg in aggregates:
            for e, m, lo, hi in zip(agg.episodes, agg.mean, agg.ci_lo,
                                    agg.ci_hi):
                writer.writerow((agg.series, int(e), repr(float(m)),
                                 repr(float(lo)), repr(float(hi))))

    width, height, pad = 640, 400, 40
    svg_path = os.path.join(out_dir, f"plot_{metric}.svg")
    body = io.StringIO()
    body.write(f'<svg xmlns="http://www.w3.org/2000/svg" '
               f'width="{width}" height="{height}">\n')
    body.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    if aggregates:
        all_x = np.concatenate([a.episodes for a in aggregates])
        all_y = np.concatenate([a.mean for a in aggregates])
        x_rng = (float(all_x.min()), float(all_x.max()))
        y_rng = (float(all_y.min()), float(all_y.max()))
        for j, agg in enumerate(aggregates):
            color = _COLORS[j % len(_COLORS)]
            body.write(_svg_polyline(agg.episodes, agg.mean, width, height,
                                     pad, x_rng, y_rng, color) + "\n")
            body.write(f'<text x="{pad}" y="{pad + 14 * j}" fill="{color}" '
                       f'font-size="12">{agg.series}</text>\n')
    body.write("</svg>\n")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(body.getvalue())
    return csv_path, svg_path


# ---------------------------------------------------------------------------
# Sensitivity study.


@dataclass
class SensitivityRow:
    n: int
    baseline_return: float
    candidate_return: float
    pct_improvement: float


def _mean_final_return(rows: list[MetricRow], episodes: int) -> float:
    tail = max(1, episodes // 10)
    vals = [r.ret for r in rows if r.episode >= episodes - tail]
    return float(np.mean(vals))


def sensitivity_study(base: ExperimentConfig, n_values=(2, 3, 4, 5),
                      algos: tuple[str, str] = ("ql", "wcql"),
                      size_key: str = "n_spots") -> list[SensitivityRow]:
    """Vary the number of subproblems and compare two algorithms under
    shared seeds. Percent improvement is (candidate - baseline) /
    |baseline| * 100 of the mean return over the final tenth of training.
    """
    out = []
    for n in n_values:
        overrides = dict(base.env_overrides)
        overrides[size_key] = n
        means = []
        for algo in algos:
            cfg = replace(base, algo=algo, env_overrides=overrides)
            results = _collect_replications(cfg)
            rows = [row for res in results for row in res.rows]
            means.append(_mean_final_return(rows, cfg.episodes))
        baseline, candidate = means
        pct = (candidate - baseline) / abs(baseline) * 100.0
        out.append(SensitivityRow(n=n, baseline_return=baseline,
                                  candidate_return=candidate,
                                  pct_improvement=pct))
    return out


def write_sensitivity_csv(rows: list[SensitivityRow], path,
                          algos: tuple[str, str] = ("ql", "wcql")) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("n", f"return_{algos[0]}", f"return_{algos[1]}",
                         "pct_improvement"))
        for row in rows:
            writer.writerow((row.n, repr(row.baseline_return),
                             repr(row.candidate_return),
                             repr(row.pct_improvement)))
