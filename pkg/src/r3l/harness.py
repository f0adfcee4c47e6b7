"""Experiment orchestration: exploration ablation, pipeline comparison, summaries."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import failure_counts, fit_failure_tail
from .bc import PolicyNet, clone_policy
from .envs import make_env
from .planner import (
    ExplorationFailure,
    ExploreConfig,
    RunStats,
    collect_demos,
    explore,
    write_run_stats,
)
from .rl import refine, write_curve
from .steering import make_steering
from .utils import derive_seed, version_string, write_json

logger = logging.getLogger(__name__)

DEFAULT_BUDGETS = {
    "mountaincar": 50_000,
    "pendulum": 50_000,
    "acrobot": 200_000,
    "cartpole_swingup": 300_000,
}
DEFAULT_VARIANTS = (("learned", 0.05), ("random", 0.05), ("learned", 0.0), ("random", 0.0))
METHODS = ("r3l_pg", "vanilla_pg")


@dataclass
class PipelineSettings:
    methods: tuple = METHODS
    n_demos: int = 10
    bc_epochs: int = 500
    bc_batch_size: int = 64
    bc_learning_rate: float = 1e-3
    iterations: int = 100
    batch_timesteps: Optional[int] = None
    kl_limit: float = 0.01
    explore_goal_bias: float = 0.05


@dataclass
class ExperimentConfig:
    envs: tuple = ("mountaincar",)
    variants: tuple = DEFAULT_VARIANTS
    n_runs: int = 20
    master_seed: int = 0
    seeds: Optional[list] = None
    budgets: dict = field(default_factory=dict)
    stop_at_goal: bool = True
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    n_jobs: int = 1

    def __post_init__(self):
        if isinstance(self.pipeline, dict):
            self.pipeline = PipelineSettings(**self.pipeline)
        self.envs = tuple(self.envs)
        self.variants = tuple((str(m), float(p)) for m, p in self.variants)
        self.pipeline.methods = tuple(self.pipeline.methods)
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be at least 1")
        if self.seeds is not None:
            if len(set(self.seeds)) != len(self.seeds):
                raise ValueError("seeds must be distinct")
            if len(self.seeds) < self.n_runs:
                raise ValueError("fewer seeds than n_runs")
        unknown = set(self.pipeline.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown pipeline methods {sorted(unknown)}")

    def run_seeds(self, env_index: int) -> list:
        if self.seeds is not None:
            return list(self.seeds[: self.n_runs])
        return [derive_seed(self.master_seed, env_index, i) for i in range(self.n_runs)]

    def budget(self, env_id: str) -> int:
        return int(self.budgets.get(env_id, DEFAULT_BUDGETS.get(env_id, 50_000)))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def _run_tasks(func, tasks, n_jobs):
    """Apply ``func(*task)`` to every task; results come back in task order.

    With ``n_jobs > 1`` idle workers pull the next pending task from a shared
    queue.  Every task carries its own seed, so results do not depend on
    which worker ran it.
    """
    if n_jobs <= 1:
        return [func(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        futures = [pool.submit(func, *t) for t in tasks]
        return [f.result() for f in futures]


# -- exploration ablation ------------------------------------------------------


def run_exploration(env_id, steering_mode, goal_bias, seed, budget, stop_at_goal=True):
    """One exploration run on a fresh environment and steering model."""
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    steering = make_steering(steering_mode, env, rng)
    cfg = ExploreConfig(budget, goal_bias, steering_mode, seed, stop_at_goal)
    _, traj, stats = explore(env, steering, cfg, rng=rng)
    assert stats.timesteps == env.n_steps
    return traj, stats


def run_ablation(config: ExperimentConfig, out_dir=None):
    """Explore every (env, steering, goal bias) cell ``n_runs`` times.

    Returns the per-run :class:`RunStats` and the aggregated table (see
    :func:`ablation_table`).  With ``out_dir`` the runs are written as CSV
    next to a formatted table and a manifest.
    """
    tasks = [
        (env_id, mode, p_g, seed, config.budget(env_id), config.stop_at_goal)
        for env_index, env_id in enumerate(config.envs)
        for mode, p_g in config.variants
        for seed in config.run_seeds(env_index)
    ]
    all_stats = [stats for _, stats in _run_tasks(run_exploration, tasks, config.n_jobs)]
    for s in all_stats:
        logger.info("%s %s p_g=%.2f seed=%d: |tau|=%d timesteps=%d success=%s", s.env_id,
                    s.steering_mode, s.goal_bias, s.seed, s.traj_len, s.timesteps, s.success)
    table = ablation_table(all_stats, config.envs, config.variants)
    if out_dir is not None:
        out = Path(out_dir)
        write_run_stats(out / "ablation_runs.csv", all_stats)
        (out / "ablation_table.txt").write_text(format_ablation_table(table) + "\n")
        write_table_csv(out / "ablation_table.csv", table)
        write_manifest(out / "manifest.json", config, kind="ablation",
                       seeds={e: config.run_seeds(i) for i, e in enumerate(config.envs)})
    return all_stats, table


def ablation_table(stats, envs, variants):
    """Mean and std of successful trajectory length and of timesteps per cell."""
    table = {}
    for env_id in envs:
        row = {}
        for mode, p_g in variants:
            cell = [s for s in stats
                    if s.env_id == env_id and s.steering_mode == mode and s.goal_bias == p_g]
            lengths = [s.traj_len for s in cell if s.success]
            steps = [s.timesteps for s in cell]
            row[(mode, p_g)] = {
                "traj_len_mean": float(np.mean(lengths)) if lengths else float("nan"),
                "traj_len_std": float(np.std(lengths)) if lengths else float("nan"),
                "timesteps_mean": float(np.mean(steps)) if steps else float("nan"),
                "timesteps_std": float(np.std(steps)) if steps else float("nan"),
                "n_runs": len(cell),
                "n_success": len(lengths),
            }
        table[env_id] = row
    return table


def _cell_name(mode, p_g):
    bias = f"goal bias p_g={p_g:g}" if p_g > 0 else "unbiased p_g=0"
    return f"{bias}, {mode}"


def format_ablation_table(table) -> str:
    """Rows are environments with |tau| and timesteps sub-rows; columns are cells."""
    variants = list(next(iter(table.values())).keys())
    headers = ["env", "metric"] + [_cell_name(m, p) for m, p in variants]
    lines = []
    for env_id, row in table.items():
        for metric, key in (("|tau|", "traj_len"), ("timesteps", "timesteps")):
            cells = [f"{row[v][key + '_mean']:.2f} ± {row[v][key + '_std']:.2f}" for v in variants]
            lines.append([env_id if metric == "|tau|" else "", metric] + cells)
    widths = [max(len(str(r[i])) for r in [headers] + lines) for i in range(len(headers))]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*headers), "-+-".join("-" * w for w in widths)]
    out += [fmt.format(*r) for r in lines]
    return "\n".join(out)


def write_table_csv(path, table):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["env", "steering_mode", "p_g", "traj_len_mean", "traj_len_std",
                         "timesteps_mean", "timesteps_std", "n_runs", "n_success"])
        for env_id, row in table.items():
            for (mode, p_g), cell in row.items():
                writer.writerow([env_id, mode, p_g, cell["traj_len_mean"], cell["traj_len_std"],
                                 cell["timesteps_mean"], cell["timesteps_std"], cell["n_runs"],
                                 cell["n_success"]])


def exploration_tail(env_id, seeds, budgets, steering_mode="learned", goal_bias=0.05):
    """Failure fractions at each budget and their exponential-tail fit.

    A run with budget ``k`` is the first ``k`` iterations of the same seeded
    run with the largest budget, so each seed is explored once and its
    first-success timestep is compared against every budget.
    """
    first_success = []
    for seed in seeds:
        _, stats = run_exploration(env_id, steering_mode, goal_bias, seed, max(budgets))
        first_success.append(stats.timesteps if stats.success else None)
    counts = failure_counts(first_success, budgets)
    return counts, fit_failure_tail(counts)


# -- pipeline comparison ---------------------------------------------------------


@dataclass
class LearningCurve:
    env_id: str
    method: str
    seed: int
    timesteps: np.ndarray
    returns: np.ndarray
    offset: int = 0

    def value_at(self, t):
        """Step interpolation: the last recorded return at or before ``t``."""
        idx = np.searchsorted(self.timesteps, t, side="right") - 1
        return np.where(idx >= 0, self.returns[np.clip(idx, 0, None)], np.nan)

    @classmethod
    def from_csv(cls, path, env_id, method, offset=0):
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        return cls(env_id, method, int(rows[0]["seed"]) if rows else 0,
                   np.array([int(r["cumulative_timesteps"]) for r in rows]),
                   np.array([float(r["mean_return"]) for r in rows]), offset)


def run_pipeline_seed(env_id, method, seed, settings: PipelineSettings, budget):
    """One seed of one method; returns the learning curve and run metadata."""
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    meta = {"env": env_id, "method": method, "seed": seed, "failed": False}
    if method == "r3l_pg":
        cfg = ExploreConfig(budget, settings.explore_goal_bias, "learned",
                            derive_seed(seed, 1), stop_at_goal=True)
        try:
            demos = collect_demos(env, lambda e, r: make_steering("learned", e, r), cfg,
                                  settings.n_demos)
        except ExplorationFailure as exc:
            meta.update(failed=True, error=str(exc))
            return None, meta
        offset = env.n_steps
        meta["demo_timesteps"] = demos.timesteps
        meta["demo_mean_return"] = float(np.mean([t.undiscounted_return()
                                                  for t in demos.trajectories]))
        policy, bc_curve = clone_policy(env, demos, rng=rng, epochs=settings.bc_epochs,
                                        batch_size=settings.bc_batch_size,
                                        learning_rate=settings.bc_learning_rate)
        meta["bc_final_loss"] = float(bc_curve[-1])
    elif method == "vanilla_pg":
        offset = 0
        policy = PolicyNet.for_env(env, rng=rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    meta["offset"] = offset
    curve = refine(policy, env, settings.iterations, settings.batch_timesteps, rng,
                   timestep_offset=offset, kl_limit=settings.kl_limit)
    # Every reported timestep is an env.step call made for this seed.
    assert (curve[-1].cumulative_timesteps if curve else offset) == env.n_steps
    meta["total_timesteps"] = env.n_steps
    lc = LearningCurve(env_id, method, seed,
                       np.array([p.cumulative_timesteps for p in curve]),
                       np.array([p.mean_return for p in curve]), offset)
    return (lc, curve, policy), meta


def _timed_pipeline_seed(*args):
    start = time.perf_counter()
    res, meta = run_pipeline_seed(*args)
    meta["wall_time"] = time.perf_counter() - start
    return res, meta


def run_pipeline(config: ExperimentConfig, out_dir=None):
    """Run every pipeline method on every seed of every environment.

    Returns ``{(env_id, method): [LearningCurve, ...]}`` and the manifest
    entries.  Seeds whose exploration fails after retries are marked failed
    in the manifest and contribute no curve.
    """
    settings = config.pipeline
    results, runs = {}, []
    out = Path(out_dir) if out_dir is not None else None
    tasks = [
        (env_id, method, seed, settings, config.budget(env_id))
        for env_index, env_id in enumerate(config.envs)
        for method in settings.methods
        for seed in config.run_seeds(env_index)
    ]
    for key in tasks:
        results.setdefault(key[:2], [])
    for (env_id, method, seed, *_), (res, meta) in zip(
            tasks, _run_tasks(_timed_pipeline_seed, tasks, config.n_jobs)):
        if res is not None:
            lc, raw_curve, policy = res
            results[(env_id, method)].append(lc)
            if out is not None:
                stem = f"{env_id}_{method}_seed{seed}"
                write_curve(out / "curves" / f"{stem}.csv", raw_curve, seed)
                policy.save(out / "policies" / f"{stem}.json")
                meta["curve_file"] = f"curves/{stem}.csv"
        logger.info("pipeline %s %s seed=%d done in %.1fs", env_id, method, seed,
                    meta["wall_time"])
        runs.append(meta)
    if out is not None:
        write_manifest(out / "manifest.json", config, kind="pipeline", runs=runs)
        summaries = {f"{e}/{m}": summarize(c, quartiles=len(c) >= 3)
                     for (e, m), c in results.items() if c}
        write_json(out / "summary.json", summaries)
    return results, runs


def checkpoint_grid(curves, n_points=50, start=None):
    """Evenly spaced timesteps from ``start`` to the end of the shortest curve."""
    end = min(int(c.timesteps[-1]) for c in curves)
    if start is None:
        start = min(int(c.timesteps[0]) for c in curves)
    return np.linspace(start, end, n_points)


def summarize(curves, checkpoints=None, quartiles=True):
    """Median (and quartiles) across seeds at each checkpoint.

    Curves are step-interpolated; a checkpoint before a curve's first point
    has no value for that curve and is reported as NaN.
    """
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to summarize")
    envs = {c.env_id for c in curves}
    if len(envs) != 1:
        raise ValueError(f"curves from different environments: {sorted(envs)}")
    if quartiles and len(curves) < 3:
        raise ValueError("interquartile ranges need at least 3 seeds")
    if checkpoints is None:
        checkpoints = checkpoint_grid(curves)
    checkpoints = np.asarray(checkpoints, dtype=float)
    values = np.vstack([c.value_at(checkpoints) for c in curves])
    defined = ~np.all(np.isnan(values), axis=0)
    median = np.full(len(checkpoints), np.nan)
    median[defined] = np.nanmedian(values[:, defined], axis=0)
    out = {
        "env": envs.pop(),
        "n_seeds": len(curves),
        "checkpoints": checkpoints.tolist(),
        "median": median.tolist(),
    }
    if quartiles:
        q25 = np.full(len(checkpoints), np.nan)
        q75 = np.full(len(checkpoints), np.nan)
        q25[defined] = np.nanpercentile(values[:, defined], 25, axis=0)
        q75[defined] = np.nanpercentile(values[:, defined], 75, axis=0)
        out["q25"] = q25.tolist()
        out["q75"] = q75.tolist()
    return out


def load_pipeline_curves(manifest_path):
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    results = {}
    for run in manifest["runs"]:
        if run.get("failed") or "curve_file" not in run:
            continue
        lc = LearningCurve.from_csv(manifest_path.parent / run["curve_file"], run["env"],
                                    run["method"], run.get("offset", 0))
        results.setdefault((run["env"], run["method"]), []).append(lc)
    return results


def write_manifest(path, config: ExperimentConfig, kind: str, **extra):
    write_json(path, {
        "kind": kind,
        "version": version_string(),
        "config": config.to_dict(),
        **extra,
    })


def stats_from_csv(path):
    with Path(path).open() as fh:
        return [
            RunStats(r["env"], r["steering_mode"], float(r["p_g"]), int(r["seed"]),
                     int(r["traj_len"]), int(r["timesteps"]), bool(int(r["success"])))
            for r in csv.DictReader(fh)
        ]
