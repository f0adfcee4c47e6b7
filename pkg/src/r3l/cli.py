"""Command-line entry point: ``r3l <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .bc import PolicyNet, build_dataset, train_bc
from .envs import ENV_IDS, make_env
from .harness import (
    ExperimentConfig,
    exploration_tail,
    format_ablation_table,
    load_pipeline_curves,
    run_ablation,
    run_pipeline,
    summarize,
)
from .planner import DemoSet, ExploreConfig, collect_demos, write_run_stats
from .rl import refine, write_curve
from .steering import make_steering
from .utils import derive_seed, version_string, write_json


def _cmd_explore(args):
    env = make_env(args.env)
    cfg = ExploreConfig(args.budget, args.goal_bias, args.steering, args.seed)
    demos = collect_demos(env, lambda e, r: make_steering(args.steering, e, r), cfg, args.n_demos)
    out = Path(args.out)
    demos.save(out / "demos.jsonl")
    write_run_stats(out / "run_stats.csv", demos.stats)
    write_json(out / "manifest.json", {
        "kind": "explore",
        "version": version_string(),
        "args": vars(args) | {"func": None},
        "seeds": demos.seeds,
        "timesteps": demos.timesteps,
    })
    for traj, seed in zip(demos.trajectories, demos.seeds):
        print(f"seed={seed} |tau|={len(traj)} success={traj.successful}")
    print(f"total timesteps: {demos.timesteps}")


def _cmd_bench(args):
    config = ExperimentConfig.from_json(args.config)
    _, table = run_ablation(config, out_dir=args.out)
    print(format_ablation_table(table))


def _cmd_bc(args):
    demos = DemoSet.load(args.demos)
    env = make_env(demos.env_id)
    rng = np.random.default_rng(args.seed)
    policy = PolicyNet.for_env(env, sigma=args.sigma, rng=rng)
    curve = train_bc(policy, build_dataset(demos, env), args.epochs, args.batch_size,
                     args.lr, rng=rng)
    policy.save(args.out)
    print(f"trained on {sum(len(t) for t in demos.trajectories)} transitions; "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f}")


def _cmd_refine(args):
    env = make_env(args.env)
    rng = np.random.default_rng(args.seed)
    if args.init == "random":
        policy = PolicyNet.for_env(env, rng=rng)
    else:
        policy = PolicyNet.load(args.init)
    curve = refine(policy, env, args.iters, args.batch, rng, timestep_offset=args.offset)
    if args.out:
        write_curve(args.out, curve, args.seed)
    if args.save_policy:
        policy.save(args.save_policy)
    for p in curve:
        print(f"iter {p.iteration:4d}  timesteps {p.cumulative_timesteps:8d}  "
              f"return {p.mean_return:9.2f}  kl {p.kl:.4f}  success {p.success_rate:.2f}")


def _cmd_pipeline(args):
    config = ExperimentConfig.from_json(args.config)
    results, runs = run_pipeline(config, out_dir=args.out)
    for (env_id, method), curves in results.items():
        finals = [c.returns[-1] for c in curves]
        print(f"{env_id} {method}: {len(curves)} seeds, median final return "
              f"{np.median(finals):.2f}")
    failed = [r for r in runs if r["failed"]]
    if failed:
        print(f"{len(failed)} seed(s) failed exploration; see manifest")


def _cmd_summarize(args):
    results = load_pipeline_curves(args.manifest)
    summary = {f"{e}/{m}": summarize(c, quartiles=len(c) >= 3) for (e, m), c in results.items()}
    text = json.dumps(summary, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _cmd_analyze_hitting(args):
    rng = np.random.default_rng(args.seed)
    out = {"r": args.r, "R": args.R, "d": args.d,
           "formula": analysis.hitting_probability(args.r, args.R, args.d)}
    if args.walks:
        out["monte_carlo"] = analysis.monte_carlo_hitting_probability(
            args.r, args.R, args.d, args.walks, rng)
        out["walks"] = args.walks
    print(json.dumps(out, indent=2))


def _cmd_analyze_bound(args):
    print(json.dumps({"a": args.a, "b": args.b,
                      "bound": analysis.sampling_complexity_bound(args.a, args.b)}, indent=2))


def _tail_report(env_id, n_seeds, budgets, steering, goal_bias, master_seed):
    seeds = [derive_seed(master_seed, 7, i) for i in range(n_seeds)]
    counts, fit = exploration_tail(env_id, seeds, budgets, steering, goal_bias)
    return counts, fit


def _write_tail_csv(path, counts):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget", "failures", "runs", "failure_fraction"])
        for k, (fails, total) in sorted(counts.items()):
            writer.writerow([k, fails, total, fails / total])


def _cmd_analyze_tail(args):
    counts, fit = _tail_report(args.env, args.seeds, args.budgets, args.steering,
                               args.goal_bias, args.seed)
    if args.out:
        _write_tail_csv(Path(args.out) / "failure_fractions.csv", counts)
    print(json.dumps({"env": args.env, "tail_fit": fit.to_dict(),
                      "expected_iterations_bound": fit.expected_iterations_bound()}, indent=2))


def _cmd_analyze_report(args):
    rng = np.random.default_rng(args.seed)
    report = {"version": version_string(), "hitting_probability": [], "sampling_complexity": []}
    for d in (3, 4, 5):
        report["hitting_probability"].append({
            "d": d, "r_over_R": 0.5,
            "formula": analysis.hitting_probability(0.5, 1.0, d),
            "monte_carlo": analysis.monte_carlo_hitting_probability(0.5, 1.0, d, args.walks, rng),
            "walks": args.walks,
        })
    for a in (1.0, 10.0):
        for b in (0.05, math.log(2), math.log(4)):
            report["sampling_complexity"].append(
                {"a": a, "b": b, "bound": analysis.sampling_complexity_bound(a, b)})
    counts, fit = _tail_report(args.env, args.seeds, args.budgets, "learned", 0.05, args.seed)
    report["tail_fit"] = fit.to_dict() | {"env": args.env}
    out = Path(args.out)
    write_json(out / "analysis.json", report)
    _write_tail_csv(out / "failure_fractions.csv", counts)
    print(json.dumps(report, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r3l", description=__doc__)
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explore", help="run exploration and save demonstrations")
    p.add_argument("--env", required=True, choices=ENV_IDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=50_000)
    p.add_argument("--goal-bias", type=float, default=0.05)
    p.add_argument("--steering", choices=("learned", "random"), default="learned")
    p.add_argument("--n-demos", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_explore)

    p = sub.add_parser("bench", help="exploration ablation from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="results/bench")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("bc", help="behaviour cloning from a demonstration file")
    p.add_argument("--demos", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=0.3)
    p.set_defaults(func=_cmd_bc)

    p = sub.add_parser("refine", help="policy-gradient refinement")
    p.add_argument("--env", required=True, choices=ENV_IDS)
    p.add_argument("--init", default="random", help="policy checkpoint or 'random'")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--batch", type=int, default=None, help="timesteps per iteration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--offset", type=int, default=0, help="timesteps already spent")
    p.add_argument("--out", help="learning-curve CSV")
    p.add_argument("--save-policy")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("pipeline", help="exploration + cloning + refinement vs vanilla")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="results/pipeline")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("summarize", help="median/IQR of pipeline curves")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("analyze", help="random-walk and sampling-complexity analysis")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("hitting", help="random-walk hitting probability")
    a.add_argument("--r", type=float, default=0.5)
    a.add_argument("--R", type=float, default=1.0)
    a.add_argument("--d", type=int, default=3)
    a.add_argument("--walks", type=int, default=0, help="Monte Carlo walks (0: formula only)")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=_cmd_analyze_hitting)
    a = asub.add_parser("bound", help="expected sampling complexity bound")
    a.add_argument("--a", type=float, required=True)
    a.add_argument("--b", type=float, required=True)
    a.set_defaults(func=_cmd_analyze_bound)
    for name, func in (("tail", _cmd_analyze_tail), ("report", _cmd_analyze_report)):
        a = asub.add_parser(name, help="exponential failure-tail fit" if name == "tail"
                            else "full JSON report with CSV of failure fractions")
        a.add_argument("--env", default="mountaincar", choices=ENV_IDS)
        a.add_argument("--seeds", type=int, default=50)
        a.add_argument("--budgets", type=int, nargs="+", default=[250, 500, 1000, 2000, 4000])
        a.add_argument("--seed", type=int, default=0)
        if name == "tail":
            a.add_argument("--steering", choices=("learned", "random"), default="learned")
            a.add_argument("--goal-bias", type=float, default=0.05)
            a.add_argument("--out")
        else:
            a.add_argument("--walks", type=int, default=10_000)
            a.add_argument("--out", default="results/analysis")
        a.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
