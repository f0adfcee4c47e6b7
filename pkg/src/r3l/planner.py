"""Kinodynamic RRT exploration with goal biasing and learned steering."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .envs import Environment
from .utils import derive_seed, to_jsonable

__all__ = [
    "DemoSet",
    "ExplorationFailure",
    "ExplorationTree",
    "ExploreConfig",
    "NoExpandableNodeError",
    "RunStats",
    "Trajectory",
    "TreeNode",
    "collect_demos",
    "explore",
    "extract_trajectory",
    "nearest",
]


class NoExpandableNodeError(RuntimeError):
    """Every node in the tree sits at the horizon."""


class ExplorationFailure(RuntimeError):
    """Demonstration collection ran out of retries."""

    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


@dataclass
class TreeNode:
    state: np.ndarray
    parent: Optional[int]
    action_from_parent: Optional[np.ndarray]
    depth: int
    cum_return: float
    reward: float = 0.0


class ExplorationTree:
    """Append-only tree; ``parent < child`` for every edge.

    Normalized states live in a preallocated array that doubles as the
    nearest-neighbour index.
    """

    def __init__(self, env: Environment, root_state, capacity: int = 1024):
        self.env = env
        self.nodes: list[TreeNode] = []
        self._norm = np.empty((capacity, env.state_dim))
        self._depth = np.empty(capacity, dtype=np.int64)
        self._add(TreeNode(np.asarray(root_state, dtype=float).copy(), None, None, 0, 0.0))

    def __len__(self):
        return len(self.nodes)

    def _add(self, node: TreeNode) -> int:
        idx = len(self.nodes)
        if idx == len(self._norm):
            self._norm = np.concatenate([self._norm, np.empty_like(self._norm)])
            self._depth = np.concatenate([self._depth, np.empty_like(self._depth)])
        self._norm[idx] = self.env.normalize(node.state)
        self._depth[idx] = node.depth
        self.nodes.append(node)
        return idx

    def add_child(self, parent: int, action, next_state, reward: float) -> int:
        p = self.nodes[parent]
        cum = p.cum_return + self.env.discount ** p.depth * reward
        node = TreeNode(np.asarray(next_state, dtype=float).copy(), parent,
                        np.asarray(action, dtype=float).copy(), p.depth + 1, cum, reward)
        return self._add(node)

    @property
    def normalized_states(self) -> np.ndarray:
        return self._norm[: len(self.nodes)]

    @property
    def depths(self) -> np.ndarray:
        return self._depth[: len(self.nodes)]

    def cum_returns(self) -> np.ndarray:
        return np.array([n.cum_return for n in self.nodes])


def nearest(tree: ExplorationTree, query) -> int:
    """Index of the expandable node closest to ``query`` in normalized space.

    Nodes at the horizon are skipped; ties go to the lowest index.
    """
    q = tree.env.normalize(query)
    diff = tree.normalized_states - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    d2[tree.depths >= tree.env.horizon] = np.inf
    idx = int(np.argmin(d2))
    if not np.isfinite(d2[idx]):
        raise NoExpandableNodeError("all nodes are at the horizon")
    return idx


@dataclass
class Trajectory:
    """States ``s_0..s_T``, actions ``a_0..a_{T-1}`` and per-step rewards."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    successful: bool

    def __len__(self):
        return len(self.actions)

    def discounted_return(self, discount: float) -> float:
        return float(sum(discount ** t * r for t, r in enumerate(self.rewards)))

    def undiscounted_return(self) -> float:
        return float(np.sum(self.rewards))

    def records(self):
        """One JSON-ready record per transition."""
        n = len(self)
        for t in range(n):
            yield {
                "state": self.states[t].tolist(),
                "action": self.actions[t].tolist(),
                "reward": float(self.rewards[t]),
                "done": bool(self.successful and t == n - 1),
                "next_state": self.states[t + 1].tolist(),
            }

    @classmethod
    def from_records(cls, records, successful=None, root=None):
        records = list(records)
        if not records:
            return cls(np.asarray([root], dtype=float), np.zeros((0, 1)), np.zeros(0),
                       bool(successful))
        states = [r["state"] for r in records] + [records[-1]["next_state"]]
        return cls(
            np.asarray(states, dtype=float),
            np.asarray([r["action"] for r in records], dtype=float),
            np.asarray([r["reward"] for r in records], dtype=float),
            bool(records[-1]["done"]) if successful is None else successful,
        )


def extract_trajectory(tree: ExplorationTree, leaf: int) -> Trajectory:
    """Root-to-leaf path as a :class:`Trajectory`."""
    path = []
    idx: Optional[int] = leaf
    while idx is not None:
        path.append(tree.nodes[idx])
        idx = tree.nodes[idx].parent
    path.reverse()
    env = tree.env
    states = np.array([n.state for n in path])
    if len(path) > 1:
        actions = np.array([n.action_from_parent for n in path[1:]])
    else:
        actions = np.zeros((0, env.action_dim))
    rewards = np.array([n.reward for n in path[1:]], dtype=float)
    successful = bool(env.goal_defined and env.in_goal(states[-1]))
    return Trajectory(states, actions, rewards, successful)


@dataclass
class ExploreConfig:
    budget: int = 10_000
    goal_bias: float = 0.05
    steering_mode: str = "learned"
    seed: int = 0
    # None: stop at the first goal node only for tasks whose goal ends the episode.
    stop_at_goal: Optional[bool] = None

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")
        if self.steering_mode not in ("learned", "random"):
            raise ValueError(f"unknown steering mode {self.steering_mode!r}")


@dataclass
class RunStats:
    env_id: str
    steering_mode: str
    goal_bias: float
    seed: int
    traj_len: int
    timesteps: int
    success: bool
    wall_time: float = 0.0

    FIELDS = ("env", "steering_mode", "p_g", "seed", "traj_len", "timesteps", "success")

    def row(self) -> dict:
        return {
            "env": self.env_id,
            "steering_mode": self.steering_mode,
            "p_g": self.goal_bias,
            "seed": self.seed,
            "traj_len": self.traj_len,
            "timesteps": self.timesteps,
            "success": int(self.success),
        }


def write_run_stats(path, stats) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RunStats.FIELDS)
        writer.writeheader()
        for s in stats:
            writer.writerow(s.row())


def explore(env: Environment, steering, config: ExploreConfig, root=None, rng=None):
    """Grow an exploration tree from ``root`` (or a fresh reset).

    Each iteration draws a target state (from the goal set with probability
    ``config.goal_bias``), expands the nearest expandable node with one
    action sampled from ``steering`` and feeds the observed transition back
    into the steering model.

    Returns
    -------
    tree : ExplorationTree
    trajectory : Trajectory
        Path to the first goal node, or to the best-return node (goal nodes
        preferred) once the budget is spent.
    stats : RunStats
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    start_time = time.perf_counter()
    start_steps = env.n_steps
    if root is None:
        root = env.reset(rng)
    tree = ExplorationTree(env, root, capacity=min(config.budget + 1, 1 << 16))
    stop_at_goal = config.stop_at_goal
    if stop_at_goal is None:
        stop_at_goal = env.terminates_at_goal
    use_goal = env.goal_defined and config.goal_bias > 0.0

    leaf = None
    if env.goal_defined and env.in_goal(tree.nodes[0].state):
        leaf = 0
    else:
        for _ in range(config.budget):
            if use_goal and rng.random() < config.goal_bias:
                target = env.sample_goal_state(rng)
            else:
                target = env.sample_state_uniform(rng)
            try:
                near = nearest(tree, target)
            except NoExpandableNodeError:
                break
            s_near = tree.nodes[near].state
            action = steering.sample(s_near, target, rng)
            tr = env.transition(s_near, action)
            steering.update(s_near, tr.next_state, tr.action)
            new = tree.add_child(near, tr.action, tr.next_state, tr.reward)
            if stop_at_goal and env.goal_defined and env.in_goal(tr.next_state):
                leaf = new
                break

    if leaf is None:
        leaf = _best_node(tree)
    traj = extract_trajectory(tree, leaf)
    stats = RunStats(
        env_id=env.env_id,
        steering_mode=config.steering_mode,
        goal_bias=config.goal_bias,
        seed=config.seed,
        traj_len=len(traj),
        timesteps=env.n_steps - start_steps,
        success=traj.successful,
        wall_time=time.perf_counter() - start_time,
    )
    return tree, traj, stats


def _best_node(tree: ExplorationTree) -> int:
    returns = tree.cum_returns()
    env = tree.env
    if env.goal_defined:
        in_goal = np.array([env.in_goal(n.state) for n in tree.nodes])
        if in_goal.any():
            returns = np.where(in_goal, returns, -np.inf)
    return int(np.argmax(returns))


@dataclass
class DemoSet:
    trajectories: list
    env_id: str
    seeds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    stats: list = field(default_factory=list)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a demonstration set needs at least one trajectory")

    def __len__(self):
        return len(self.trajectories)

    @property
    def timesteps(self) -> int:
        """Environment interactions spent on every run, failed ones included."""
        return int(sum(s.timesteps for s in self.stats))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "env_id": self.env_id,
            "seeds": self.seeds,
            "config": self.config,
            "n_trajectories": len(self.trajectories),
            "roots": [t.states[0].tolist() for t in self.trajectories],
            "successful": [t.successful for t in self.trajectories],
            "stats": [asdict(s) for s in self.stats],
        }
        with path.open("w") as fh:
            fh.write(json.dumps({"header": to_jsonable(header)}) + "\n")
            for i, traj in enumerate(self.trajectories):
                for t, rec in enumerate(traj.records()):
                    fh.write(json.dumps({"trajectory": i, "t": t, **rec}) + "\n")

    @classmethod
    def load(cls, path) -> "DemoSet":
        with Path(path).open() as fh:
            header = json.loads(fh.readline())["header"]
            per_traj = [[] for _ in range(header["n_trajectories"])]
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    per_traj[rec["trajectory"]].append(rec)
        trajectories = [
            Trajectory.from_records(recs, successful=ok, root=root)
            for recs, ok, root in zip(per_traj, header["successful"], header["roots"])
        ]
        stats = [RunStats(**s) for s in header.get("stats", [])]
        return cls(trajectories, header["env_id"], header["seeds"], header["config"], stats)


def collect_demos(
    env: Environment,
    steering_factory: Callable,
    config: ExploreConfig,
    n: int,
    max_retries: int = 10,
) -> DemoSet:
    """Run ``n`` independent explorations, each from a fresh reset and tree.

    ``steering_factory(env, rng)`` builds a new steering model per run.  A
    failed run is retried with a new derived seed up to ``max_retries``
    attempts per demonstration.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    trajectories, seeds, all_stats = [], [], []
    for i in range(n):
        for attempt in range(max_retries):
            seed = derive_seed(config.seed, i, attempt)
            rng = np.random.default_rng(seed)
            run_config = ExploreConfig(config.budget, config.goal_bias, config.steering_mode,
                                       seed, config.stop_at_goal)
            steering = steering_factory(env, rng)
            _, traj, stats = explore(env, steering, run_config, rng=rng)
            all_stats.append(stats)
            if traj.successful:
                trajectories.append(traj)
                seeds.append(seed)
                break
        else:
            raise ExplorationFailure(
                f"demonstration {i} failed after {max_retries} attempts", all_stats
            )
    return DemoSet(trajectories, env.env_id, seeds, asdict(config), all_stats)
